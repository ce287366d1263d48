use rtfq_core::cli;

fn main() {
    std::process::exit(cli::main_from_env());
}
