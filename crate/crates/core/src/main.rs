use std::io::{self, BufReader, Write};

fn main() {
    let mut stdout = io::stdout();
    let mut stderr = io::stderr();
    let stdin = Box::new(BufReader::new(io::stdin()));
    let code = envguard::cli::run(std::env::args_os(), stdin, &mut stdout, &mut stderr);
    let _ = stdout.flush();
    std::process::exit(code);
}
