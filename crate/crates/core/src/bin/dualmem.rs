fn main() { std::process::exit(dualmem::cli::main_with_env()); }
