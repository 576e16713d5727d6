//! Tool-side stub server answering with the builtin mocks.

use std::sync::Arc;

use axum::routing::post;
use axum::Router;
use fetalflow_core::mocks::{serve_lines, stub_line};
use fetalflow_core::protocol::BuiltinSet;

#[derive(Clone)]
struct Stub {
    tools: Arc<BuiltinSet>,
    fallback: Option<String>,
}

pub fn serve_stdio(tools: &BuiltinSet, fallback: Option<&str>) -> std::io::Result<()> {
    let stdin = std::io::stdin();
    serve_lines(tools, fallback, stdin.lock(), std::io::stdout().lock())
}

/// `POST /invoke`: one request body in, one canonical response out.
pub fn router(tools: BuiltinSet, fallback: Option<String>) -> Router {
    let stub = Stub {
        tools: Arc::new(tools),
        fallback,
    };
    Router::new().route(
        "/invoke",
        post(move |body: String| {
            let stub = stub.clone();
            async move {
                (
                    [(axum::http::header::CONTENT_TYPE, "application/json")],
                    stub_line(&stub.tools, stub.fallback.as_deref(), &body),
                )
            }
        }),
    )
}
