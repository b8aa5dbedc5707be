fn main() {
    skillplan::keep_large_allocations();
    std::process::exit(skillplan::cli::run(std::env::args_os()));
}
