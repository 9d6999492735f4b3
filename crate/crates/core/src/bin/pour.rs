fn main() {
    std::process::exit(pournet::cli::main_exit_code());
}
