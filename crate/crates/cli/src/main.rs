fn main() {
    let code = sac_cli::run(std::env::args_os(), &|k| std::env::var(k).ok());
    std::process::exit(code);
}
