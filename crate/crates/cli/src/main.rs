fn main() {
    std::process::exit(dualform_cli::run(std::env::args_os()));
}
