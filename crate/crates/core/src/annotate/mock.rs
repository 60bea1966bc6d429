//! Canned-reply stand-in for a remote localizer/annotator.

use std::net::SocketAddr;
use std::sync::{Arc, RwLock};
use std::thread::JoinHandle;

use axum::extract::State;
use axum::http::StatusCode;
use axum::routing::post;
use axum::{Json, Router};
use base64::Engine as _;
use serde_json::{json, Value};
use tokio::sync::oneshot;

use crate::error::{Error, Result};
use crate::render::Image;

/// Replies served by [`MockServer`]; swap them at runtime to script cases.
#[derive(Debug, Clone)]
pub struct MockReplies {
    pub localize: Value,
    pub annotate: Value,
}

const CANNED_ANNOTATION: &str = "## Geometric Change Summary:
### Left -> Right Change:
Remove the rectangular boss from the center of the top face.
### Right -> Left Change:
Add a rectangular boss to the center of the top face.

## Instructions for Change: Left -> Right
1. Remove the 0.40 by 0.30 boss at the center of the top face.
2. Delete the raised block sitting on the top face.
3. Cut the boss away flush with the top face.
4. Eliminate the boss to reduce part weight.
5. Remove the protrusion to simplify machining.
6. Delete the boss to clear space for a mating cover.

## Instructions for Change: Right -> Left
1. Add a 0.40 by 0.30 boss at the center of the top face.
2. Create a raised block on the top face.
3. Extrude a boss 0.12 tall from the top face.
4. Add the boss as a mounting pad for a bracket.
5. Introduce a boss to stiffen the top plate.
6. Create a locating boss for assembly alignment.
";

impl Default for MockReplies {
    fn default() -> Self {
        Self {
            localize: json!({"bbox": [0.1, 0.1, 0.4, 0.4], "instruct": "Remove the boss"}),
            annotate: json!({ "text": CANNED_ANNOTATION }),
        }
    }
}

type Shared = Arc<RwLock<MockReplies>>;

fn check_image(body: &Value) -> std::result::Result<(), (StatusCode, Json<Value>)> {
    let bad = |m: &str| (StatusCode::BAD_REQUEST, Json(json!({ "error": m })));
    let b64 = body.get("image_pgm_base64").and_then(Value::as_str).ok_or_else(|| bad("missing image_pgm_base64"))?;
    let bytes = base64::engine::general_purpose::STANDARD.decode(b64).map_err(|_| bad("bad base64"))?;
    Image::from_pgm(&bytes).map_err(|_| bad("bad pgm"))?;
    Ok(())
}

async fn localize(State(s): State<Shared>, Json(body): Json<Value>) -> std::result::Result<Json<Value>, (StatusCode, Json<Value>)> {
    check_image(&body)?;
    if body.get("prompt").and_then(Value::as_str).is_none_or(|p| p.trim().is_empty()) {
        return Err((StatusCode::BAD_REQUEST, Json(json!({"error": "missing prompt"}))));
    }
    Ok(Json(s.read().expect("replies lock").localize.clone()))
}

async fn annotate(State(s): State<Shared>, Json(body): Json<Value>) -> std::result::Result<Json<Value>, (StatusCode, Json<Value>)> {
    check_image(&body)?;
    Ok(Json(s.read().expect("replies lock").annotate.clone()))
}

/// HTTP mock on its own thread and runtime; shuts down on drop.
pub struct MockServer {
    addr: SocketAddr,
    replies: Shared,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<JoinHandle<()>>,
}

impl MockServer {
    /// Binds `addr` (use port 0 for an ephemeral port) and starts serving.
    pub fn start(addr: &str, replies: MockReplies) -> Result<Self> {
        let listener = std::net::TcpListener::bind(addr)?;
        listener.set_nonblocking(true)?;
        let addr = listener.local_addr()?;
        let shared: Shared = Arc::new(RwLock::new(replies));
        let app = Router::new()
            .route("/localize", post(localize))
            .route("/annotate", post(annotate))
            .with_state(shared.clone());
        let (tx, rx) = oneshot::channel::<()>();
        let runtime = tokio::runtime::Builder::new_current_thread()
            .enable_all()
            .build()
            .map_err(|e| Error::Transport(e.to_string()))?;
        let thread = std::thread::spawn(move || {
            runtime.block_on(async move {
                let listener = tokio::net::TcpListener::from_std(listener).expect("tokio listener");
                let _ = axum::serve(listener, app)
                    .with_graceful_shutdown(async {
                        let _ = rx.await;
                    })
                    .await;
            });
        });
        Ok(Self {
            addr,
            replies: shared,
            shutdown: Some(tx),
            thread: Some(thread),
        })
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn set_replies(&self, replies: MockReplies) {
        *self.replies.write().expect("replies lock") = replies;
    }

    /// Blocks until the server thread exits.
    pub fn wait(mut self) {
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}
