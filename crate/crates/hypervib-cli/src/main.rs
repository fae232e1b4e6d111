fn main() {
    let args: Vec<String> = std::env::args().collect();
    std::process::exit(hypervib_cli::run(&args));
}
