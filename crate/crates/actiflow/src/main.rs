fn main() {
    std::process::exit(actiflow::cli::main_exit_code());
}
