fn main() {
    std::process::exit(drive_acl::cli::main_with_args(std::env::args_os()));
}
