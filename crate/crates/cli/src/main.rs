fn main() {
    std::process::exit(tagbert_cli::main_with(std::env::args_os()));
}
