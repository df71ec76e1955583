use anyhow::Context;
use clap::Parser;

use proxy_forecast::cli::{dispatch, Cli};

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    dispatch(&cli).context("proxy-forecast failed")
}
