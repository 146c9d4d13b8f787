fn main() {
    std::process::exit(stylespace::cli::dispatch(std::env::args_os()));
}
