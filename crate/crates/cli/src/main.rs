//! `dsn3d`: synthesize, train, infer, refine, evaluate and inspect.

mod args;
mod commands;
mod config;
mod error;

use clap::Parser;

use args::{Cli, Command};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Train(a) => commands::train_cmd(a),
        Command::Infer(a) => commands::infer(a),
        Command::Refine(a) => commands::refine(a),
        Command::Eval(a) => commands::eval(a),
        Command::Sweep(a) => commands::sweep(a),
        Command::DumpKernels(a) => commands::dump_kernels(a),
    };
    if let Err(e) = result {
        eprintln!("{}", e.render());
        std::process::exit(e.exit_code());
    }
}
