fn main() {
    std::process::exit(iaas_upgrade::cli::main_with(std::env::args_os()));
}
