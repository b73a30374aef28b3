fn main() {
    std::process::exit(embodiflow::cli::main_with(std::env::args_os()));
}
