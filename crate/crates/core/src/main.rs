use ivmsm::cli::{main_with_args, CliError};

fn main() {
    if let Err(e) = main_with_args(std::env::args_os()) {
        match &e {
            CliError::Parse(msg) => eprint!("{msg}"),
            _ => eprintln!("error: {e}"),
        }
        std::process::exit(e.exit_code());
    }
}
