//! Binary entry point; all logic lives in [`medformer::cli`].

fn main() {
    std::process::exit(medformer::cli::run(std::env::args_os()));
}
