fn main() {
    std::process::exit(mahi_bench::cli::run(std::env::args_os()));
}
