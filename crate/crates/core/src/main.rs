fn main() {
    std::process::exit(radcl::cli::dispatch(std::env::args_os()));
}
