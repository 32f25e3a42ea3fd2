//! HTTP service over the pre-annotation core: accounts and sessions,
//! projects, image upload, annotation review, click-to-mask, background
//! pre-annotation, import and export jobs.

pub mod api;
pub mod auth;
pub mod bundle;
pub mod config;
pub mod error;
pub mod jobs;

use std::sync::Arc;

use axum::Router;
use prelabel_core::store::{Store, StoreError};

pub use config::{ConfigError, ServiceConfig};
pub use error::ApiError;

/// Shared handler state.
#[derive(Clone)]
pub struct AppState {
    pub store: Arc<Store>,
    pub sessions: Arc<auth::Sessions>,
    pub jobs: Arc<jobs::Jobs>,
    pub config: Arc<ServiceConfig>,
}

impl AppState {
    /// Opens the store under `data_dir` and seeds the default account.
    pub fn new(config: ServiceConfig) -> Result<Self, StoreError> {
        let store = Store::open(&config.data_dir)?;
        auth::ensure_default_admin(&store, &config.admin_user, &config.admin_password)?;
        Ok(Self {
            store: Arc::new(store),
            sessions: Arc::new(auth::Sessions::new(config.session_ttl)),
            jobs: Arc::new(jobs::Jobs::default()),
            config: Arc::new(config),
        })
    }
}

pub fn app(state: AppState) -> Router {
    api::router(state)
}

/// Binds and serves until ctrl-c.
pub async fn serve(config: ServiceConfig) -> anyhow::Result<()> {
    let bind = config.bind;
    let state = AppState::new(config)?;
    let listener = tokio::net::TcpListener::bind(bind).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, app(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
