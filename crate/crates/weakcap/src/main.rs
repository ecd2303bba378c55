//! Binary entry point for the `weakcap` command line.

fn main() {
    std::process::exit(weakcap::cli::main_entry());
}
