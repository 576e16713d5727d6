use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::time::Duration;

use fetalflow_core::domain::{ExpertResult, ImageSource, Payload, PlaneLabel, TaskType};
use fetalflow_core::json::from_json;
use fetalflow_core::protocol::{ToolClient, ToolRequest, ToolSpec, ERR_PROTOCOL, ERR_TIMEOUT, ERR_TOOL_FAILED};

const TASKS: &[TaskType] = &[TaskType::PlaneClassification];

fn request(id: &str) -> ToolRequest {
    from_json(&format!(
        r#"{{"image":{{"height":12,"id":"img1","source":{{"path":"frames/img1.png"}},"width":16}},"params":{{}},"prompt":{{"instructions":"task=plane_classification; plane=unknown","params":{{}},"task":"plane_classification"}},"request_id":"{id}","task":"plane_classification"}}"#
    ))
    .unwrap()
}

fn reply(id: &str) -> String {
    format!(
        r#"{{"request_id":"{id}","result":{{"confidence":0.9,"latency_ms":0,"payload":{{"classification":{{"brain":1.0}}}},"status":"ok","task":"plane_classification","tool_id":"remote"}}}}"#
    )
}

// Echoes an ok reply carrying the request id of each line it reads.
const ECHO: &str = r#"while IFS= read -r line; do
  id=$(printf '%s' "$line" | sed -E 's/.*"request_id":"([^"]*)".*/\1/')
  printf '{"request_id":"%s","result":{"confidence":0.9,"latency_ms":0,"payload":{"classification":{"brain":1.0}},"status":"ok","task":"plane_classification","tool_id":"remote"}}\n' "$id"
done"#;

fn sh(script: &str) -> ToolSpec {
    ToolSpec::stdio("sh_tool", TASKS, "sh", &["-c", script]).with_timeout(2_000)
}

fn assert_brain(res: &ExpertResult) {
    assert!(res.is_ok(), "{res:?}");
    assert_eq!(res.tool_id, "sh_tool");
    match res.payload.as_ref().unwrap() {
        Payload::Classification(d) => assert_eq!(d.argmax().0, PlaneLabel::Brain),
        other => panic!("unexpected payload {other:?}"),
    }
}

#[test]
fn stdio_round_trip_and_session_reuse() {
    let client = ToolClient::default();
    let tool = sh(ECHO);
    for id in ["s-1", "s-2", "s-3"] {
        assert_brain(&client.invoke(&tool, &request(id)));
    }
}

#[test]
fn stdio_sends_absolute_image_path() {
    let dir = tempfile::tempdir().unwrap();
    let seen = dir.path().join("seen.txt");
    let script = format!("IFS= read -r line; printf '%s' \"$line\" > '{}'; exit 0", seen.display());
    let client = ToolClient::default();
    let res = client.invoke(&sh(&script), &request("s-9"));
    assert!(!res.is_ok());
    let line = std::fs::read_to_string(seen).unwrap();
    let sent: ToolRequest = from_json(&line).unwrap();
    match sent.image.source {
        ImageSource::Path(p) => assert!(std::path::Path::new(&p).is_absolute(), "{p}"),
        other => panic!("unexpected source {other:?}"),
    }
}

#[test]
fn stdio_timeout() {
    let client = ToolClient::default();
    let tool = sh("read -r line; sleep 5").with_timeout(200);
    let res = client.invoke(&tool, &request("s-1"));
    assert_eq!(res.error_message(), Some(ERR_TIMEOUT));
}

#[test]
fn stdio_malformed_reply_is_protocol_error() {
    let client = ToolClient::default();
    let res = client.invoke(&sh(r#"read -r line; echo '{"bad":'"#), &request("s-1"));
    assert!(res.error_message().unwrap().starts_with(ERR_PROTOCOL), "{res:?}");
}

#[test]
fn stdio_mismatched_request_id_is_protocol_error() {
    let client = ToolClient::default();
    let script = format!("read -r line; echo '{}'", reply("other"));
    let res = client.invoke(&sh(&script), &request("s-1"));
    assert!(res.error_message().unwrap().starts_with(ERR_PROTOCOL), "{res:?}");
}

#[test]
fn stdio_nonzero_exit_is_tool_failure() {
    let client = ToolClient::default();
    let res = client.invoke(&sh("read -r line; exit 3"), &request("s-1"));
    assert!(res.error_message().unwrap().starts_with(ERR_TOOL_FAILED), "{res:?}");
}

#[test]
fn stdio_missing_command_is_tool_failure() {
    let client = ToolClient::default();
    let tool = ToolSpec::stdio("sh_tool", TASKS, "/nonexistent/fetal-tool", &[]);
    let res = client.invoke(&tool, &request("s-1"));
    assert!(res.error_message().unwrap().starts_with(ERR_TOOL_FAILED), "{res:?}");
}

#[test]
fn stdio_restarts_after_failure() {
    let dir = tempfile::tempdir().unwrap();
    let marker = dir.path().join("started");
    // First process dies; the respawned one answers.
    let script = format!(
        "if [ -e '{m}' ]; then {ECHO}; else touch '{m}'; read -r line; exit 1; fi",
        m = marker.display()
    );
    let client = ToolClient::default();
    let tool = sh(&script);
    assert!(!client.invoke(&tool, &request("s-1")).is_ok());
    assert_brain(&client.invoke(&tool, &request("s-2")));
}

/// Serves `n` connections; `respond` maps the request body to (status, body, delay).
fn http_server(
    n: usize,
    respond: impl Fn(&str) -> (u16, String, Duration) + Send + 'static,
) -> (String, std::thread::JoinHandle<Vec<String>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    let handle = std::thread::spawn(move || {
        let mut bodies = Vec::new();
        for stream in listener.incoming().take(n) {
            let mut stream = stream.unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut len = 0usize;
            let mut request_line = String::new();
            reader.read_line(&mut request_line).unwrap();
            assert!(request_line.starts_with("POST /invoke "), "{request_line}");
            loop {
                let mut h = String::new();
                reader.read_line(&mut h).unwrap();
                if h.trim().is_empty() {
                    break;
                }
                if let Some(v) = h.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
            }
            let mut body = vec![0u8; len];
            reader.read_exact(&mut body).unwrap();
            let body = String::from_utf8(body).unwrap();
            let (status, out, delay) = respond(&body);
            std::thread::sleep(delay);
            let _ = write!(
                stream,
                "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{out}",
                out.len()
            );
            bodies.push(body);
        }
        bodies
    });
    (url, handle)
}

fn request_id(body: &str) -> String {
    from_json::<ToolRequest>(body).unwrap().request_id
}

#[test]
fn http_round_trip_inlines_png() {
    let dir = tempfile::tempdir().unwrap();
    let png = dir.path().join("img1.png");
    image::GrayImage::new(16, 12).save(&png).unwrap();
    let (url, server) = http_server(1, |body| (200, reply(&request_id(body)), Duration::ZERO));
    let mut req = request("h-1");
    req.image.source = ImageSource::Path(png.to_string_lossy().into_owned());
    let tool = ToolSpec::http("sh_tool", TASKS, &url).with_timeout(2_000);
    let res = ToolClient::default().invoke(&tool, &req);
    assert_brain(&res);
    let sent: ToolRequest = from_json(&server.join().unwrap()[0]).unwrap();
    assert!(matches!(sent.image.source, ImageSource::PngBase64(_)));
}

#[test]
fn http_error_status_is_tool_failure() {
    let (url, server) = http_server(1, |_| (500, "{}".into(), Duration::ZERO));
    let tool = ToolSpec::http("sh_tool", TASKS, &url).with_timeout(2_000);
    let res = ToolClient::default().invoke(&tool, &request("h-1"));
    assert!(res.error_message().unwrap().starts_with(ERR_TOOL_FAILED), "{res:?}");
    server.join().unwrap();
}

#[test]
fn http_malformed_body_is_protocol_error() {
    let (url, server) = http_server(1, |_| (200, "{\"bad\":".into(), Duration::ZERO));
    let tool = ToolSpec::http("sh_tool", TASKS, &url).with_timeout(2_000);
    let res = ToolClient::default().invoke(&tool, &request("h-1"));
    assert!(res.error_message().unwrap().starts_with(ERR_PROTOCOL), "{res:?}");
    server.join().unwrap();
}

#[test]
fn http_timeout() {
    let (url, server) = http_server(1, |body| (200, reply(&request_id(body)), Duration::from_millis(800)));
    let tool = ToolSpec::http("sh_tool", TASKS, &url).with_timeout(200);
    let res = ToolClient::default().invoke(&tool, &request("h-1"));
    assert_eq!(res.error_message(), Some(ERR_TIMEOUT));
    server.join().unwrap();
}

#[test]
fn http_unreachable_is_tool_failure() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let tool = ToolSpec::http("sh_tool", TASKS, &format!("http://127.0.0.1:{port}")).with_timeout(1_000);
    let res = ToolClient::default().invoke(&tool, &request("h-1"));
    assert!(res.error_message().unwrap().starts_with(ERR_TOOL_FAILED), "{res:?}");
}
