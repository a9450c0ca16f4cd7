//! HTTP API over one finished run. A single scene-owner thread holds the
//! working scene; every request that reads or edits it goes through that
//! thread's queue, so edits apply in arrival order. Finalized stages are
//! only read; saving writes a new edits stage.

use std::net::SocketAddr;
use std::path::Path;
use std::sync::mpsc;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, State};
use axum::http::{header, StatusCode};
use axum::response::{Html, IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use restorelab_core::backends::Backends;
use restorelab_core::compose::{apply_edits, parse_edit_script, render, SceneEdit, Tuner};
use restorelab_core::config::PipelineConfig;
use restorelab_core::isolate::{Scene, SceneDoc};
use restorelab_core::restore::RestoreParams;
use restorelab_core::runner::{load_scene, save_edits};
use restorelab_core::store::{artifact, load_stage_output, RunHandle, RunStatus, StageManifest};
use restorelab_core::{Error, Result};
use serde::{Deserialize, Serialize};
use tokio::sync::oneshot;

const INDEX_HTML: &str = include_str!("index.html");

type Reply<T> = oneshot::Sender<Result<T>>;

enum Command {
    Scene(Reply<SceneDoc>),
    Edit(Vec<SceneEdit>, Reply<SceneDoc>),
    Render(Reply<Vec<u8>>),
    Save(Reply<SavedStage>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SavedStage {
    pub stage: String,
    pub manifest: StageManifest,
}

/// The scene owner's state.
struct Owner {
    run: RunHandle,
    config: PipelineConfig,
    backends: Backends,
    params: RestoreParams,
    scene: Scene,
    /// Edits applied since the scene was loaded or last saved.
    pending: Vec<SceneEdit>,
}

impl Owner {
    fn apply(&mut self, edits: Vec<SceneEdit>) -> Result<SceneDoc> {
        let tuner = self.backends.inpainter.as_deref().map(|inpainter| Tuner {
            inpainter,
            params: &self.params,
        });
        // All or nothing: a failing edit leaves the scene as it was.
        self.scene = apply_edits(&self.scene, &edits, tuner)?;
        self.pending.extend(edits);
        Ok(SceneDoc::of(&self.scene))
    }

    fn save(&mut self) -> Result<SavedStage> {
        let (manifest, _) = save_edits(&self.run, &self.scene, &self.pending, self.config.depth_scale_factor)?;
        self.pending.clear();
        Ok(SavedStage {
            stage: format!("{:02}_{}", manifest.stage_index, manifest.stage_name),
            manifest,
        })
    }

    fn handle(&mut self, cmd: Command) {
        // A dropped receiver means the client went away; nothing to do.
        match cmd {
            Command::Scene(tx) => drop(tx.send(Ok(SceneDoc::of(&self.scene)))),
            Command::Edit(edits, tx) => drop(tx.send(self.apply(edits))),
            Command::Render(tx) => drop(tx.send(render(&self.scene, self.config.depth_scale_factor).encode_png())),
            Command::Save(tx) => drop(tx.send(self.save())),
        }
    }
}

#[derive(Clone)]
struct AppState {
    run: Arc<RunHandle>,
    owner: mpsc::Sender<Command>,
}

impl AppState {
    async fn ask<T>(&self, make: impl FnOnce(Reply<T>) -> Command) -> Result<T> {
        let (tx, rx) = oneshot::channel();
        self.owner
            .send(make(tx))
            .map_err(|_| Error::Backend("scene owner stopped".into()))?;
        rx.await.map_err(|_| Error::Backend("scene owner stopped".into()))?
    }
}

struct ApiError(Error);

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        Self(e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = match self.0.root() {
            Error::NotFound(_) => StatusCode::NOT_FOUND,
            Error::InvalidArgument(_) | Error::Validation(_) | Error::Parse { .. } => StatusCode::BAD_REQUEST,
            Error::Conflict(_) => StatusCode::CONFLICT,
            Error::Backend(_) | Error::Protocol(_) => StatusCode::BAD_GATEWAY,
            Error::Timeout(_) => StatusCode::GATEWAY_TIMEOUT,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        (status, Json(serde_json::json!({"error": self.0.to_string()}))).into_response()
    }
}

type ApiResult<T> = std::result::Result<T, ApiError>;

fn png(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "image/png")], bytes).into_response()
}

async fn get_scene(State(s): State<AppState>) -> ApiResult<Json<SceneDoc>> {
    Ok(Json(s.ask(Command::Scene).await?))
}

async fn post_edits(State(s): State<AppState>, body: Bytes) -> ApiResult<Json<SceneDoc>> {
    let text = std::str::from_utf8(&body).map_err(|_| Error::InvalidArgument("body is not UTF-8".into()))?;
    let edits = parse_edit_script(text)?;
    Ok(Json(s.ask(|tx| Command::Edit(edits, tx)).await?))
}

async fn post_render(State(s): State<AppState>) -> ApiResult<Response> {
    Ok(png(s.ask(Command::Render).await?))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TuneBody {
    prompt: String,
}

async fn post_tune(State(s): State<AppState>, UrlPath(id): UrlPath<u32>, body: Bytes) -> ApiResult<Json<SceneDoc>> {
    let TuneBody { prompt } =
        serde_json::from_slice(&body).map_err(|e| Error::Validation(format!("tune body: {e}")))?;
    let edit = SceneEdit::Tune { object_id: id, prompt };
    Ok(Json(s.ask(|tx| Command::Edit(vec![edit], tx)).await?))
}

async fn post_save(State(s): State<AppState>) -> ApiResult<Json<SavedStage>> {
    Ok(Json(s.ask(Command::Save).await?))
}

#[derive(Serialize)]
struct StagesDoc {
    run_id: String,
    status: RunStatus,
    stages: Vec<StageManifest>,
}

async fn get_stages(State(s): State<AppState>) -> ApiResult<Json<StagesDoc>> {
    let run = s.run.clone();
    let doc = tokio::task::spawn_blocking(move || -> Result<StagesDoc> {
        Ok(StagesDoc {
            run_id: run.run_id.clone(),
            status: run.meta()?.status,
            stages: run.manifests()?,
        })
    })
    .await
    .map_err(|e| Error::Backend(e.to_string()))??;
    Ok(Json(doc))
}

async fn get_image(State(s): State<AppState>, UrlPath((stage, name)): UrlPath<(String, String)>) -> ApiResult<Response> {
    if !name.ends_with(".png") {
        return Err(Error::NotFound(format!("{name} is not an image")).into());
    }
    let run = s.run.clone();
    let bytes = tokio::task::spawn_blocking(move || -> Result<Vec<u8>> {
        let (artifacts, _) = load_stage_output(&run, &stage)?;
        Ok(artifact(&artifacts, &name)?.to_vec())
    })
    .await
    .map_err(|e| Error::Backend(e.to_string()))??;
    Ok(png(bytes))
}

async fn index() -> Html<&'static str> {
    Html(INDEX_HTML)
}

/// Load a complete run and start its scene owner. The returned router
/// serves the API and the editor page.
pub fn app(run_dir: &Path) -> Result<Router> {
    let run = RunHandle::open(run_dir)?;
    let meta = run.meta()?;
    if meta.status != RunStatus::Complete {
        return Err(Error::InvalidArgument(format!("run {} is not complete", meta.run_id)));
    }
    if meta.kind != "pipeline" {
        return Err(Error::InvalidArgument(format!("run {} has no editable scene", meta.run_id)));
    }
    let config = run.config()?;
    let (scene, _) = load_scene(&run)?;
    let backends = Backends::from_config(&config)?;
    let params = RestoreParams::from_config(&config);
    let mut owner = Owner {
        run: run.clone(),
        config,
        backends,
        params,
        scene,
        pending: Vec::new(),
    };
    let (tx, rx) = mpsc::channel::<Command>();
    std::thread::Builder::new()
        .name("scene-owner".into())
        .spawn(move || {
            for cmd in rx {
                owner.handle(cmd);
            }
        })
        .map_err(|e| Error::io(run_dir, e))?;

    let state = AppState {
        run: Arc::new(run),
        owner: tx,
    };
    Ok(Router::new()
        .route("/", get(index))
        .route("/api/scene", get(get_scene))
        .route("/api/scene/edits", post(post_edits))
        .route("/api/render", post(post_render))
        .route("/api/objects/{id}/tune", post(post_tune))
        .route("/api/save", post(post_save))
        .route("/api/stages", get(get_stages))
        .route("/api/image/{stage}/{name}", get(get_image))
        .with_state(state))
}

/// Serve `run_dir` on an already-bound listener until the process stops.
pub async fn serve_listener(run_dir: &Path, listener: tokio::net::TcpListener) -> Result<()> {
    let app = app(run_dir)?;
    let addr = listener.local_addr().map_err(|e| Error::io(run_dir, e))?;
    log::info!("serving {} on http://{addr}", run_dir.display());
    axum::serve(listener, app).await.map_err(|e| Error::io(run_dir, e))
}

/// `restorelab serve`: bind `127.0.0.1:<port>` and serve until stopped.
pub fn serve(run_dir: &Path, port: u16) -> Result<()> {
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| Error::io(run_dir, e))?;
    rt.block_on(async {
        let addr = SocketAddr::from(([127, 0, 0, 1], port));
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .map_err(|e| Error::io(Path::new(&addr.to_string()), e))?;
        serve_listener(run_dir, listener).await
    })
}
