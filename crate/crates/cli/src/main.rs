fn main() {
    let argv: Vec<String> = std::env::args().collect();
    std::process::exit(decon_cli::run(&argv));
}
