fn main() {
    std::process::exit(promptlab_cli::commands::main_with(std::env::args_os()));
}
