//! `serve`: run the triage HTTP service.

use crate::error::{CliError, CliResult};
use crate::print_config;
use bayescan_service::config::ConfigError;
use bayescan_service::{Service, ServiceConfig};
use clap::Args;
use std::path::PathBuf;

#[derive(Args, Debug)]
pub struct ServeArgs {
    /// TOML config; `BAYESCAN_*` environment variables override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

pub fn serve(args: ServeArgs) -> CliResult {
    let cfg = ServiceConfig::load(args.config.as_deref()).map_err(|e| match e {
        ConfigError::Io { .. } | ConfigError::Parse { .. } => CliError::Data(e.to_string()),
        ConfigError::Env { .. } | ConfigError::Invalid(_) => CliError::Usage(e.to_string()),
    })?;
    let mut shown = cfg.clone();
    if shown.api_token.is_some() {
        shown.api_token = Some("<redacted>".into());
    }
    print_config("serve", &shown);
    let svc = Service::from_config(cfg).map_err(|e| CliError::Data(e.to_string()))?;
    let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::Data(e.to_string()))?;
    rt.block_on(bayescan_service::serve(svc))
        .map_err(|e| CliError::Data(format!("server: {e}")))
}
