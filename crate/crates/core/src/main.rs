fn main() {
    let outcome = credit_bsde::cli::run_args(std::env::args_os());
    if outcome.code == 0 {
        println!("{}", outcome.message);
        for a in &outcome.artifacts {
            println!("wrote {}", a.display());
        }
    } else {
        eprintln!("{}", outcome.message);
    }
    std::process::exit(outcome.code);
}
