fn main() {
    std::process::exit(looped_icl::harness::cli(std::env::args_os()));
}
