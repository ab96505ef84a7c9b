fn main() {
    std::process::exit(crt_assure::cli::dispatch(std::env::args_os()));
}
