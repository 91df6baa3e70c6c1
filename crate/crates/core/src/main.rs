fn main() {
    std::process::exit(subtfr::cli::dispatch(std::env::args_os()));
}
