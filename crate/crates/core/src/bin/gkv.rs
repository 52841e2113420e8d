fn main() {
    std::process::exit(gkv::cli::run_main(std::env::args_os()));
}
