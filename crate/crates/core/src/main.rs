fn main() {
    std::process::exit(ta_audit::cli::run(std::env::args_os()));
}
