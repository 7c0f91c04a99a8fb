fn main() {
    std::process::exit(diffplan_cli::run_command(std::env::args_os()));
}
