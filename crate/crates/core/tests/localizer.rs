use std::time::{Duration, Instant};

use brepler_core::annotate::{annotate_pair, localize, Backend, MockReplies, MockServer, RemoteClient, PROMPT_COUNT};
use brepler_core::metrics::bbox_iou;
use brepler_core::synth::{build_dataset, Dataset, Direction};
use brepler_core::Error;
use serde_json::json;
use tempfile::TempDir;

fn dataset() -> (TempDir, Dataset) {
    let dir = TempDir::new().unwrap();
    build_dataset(20, 9, dir.path(), 1).unwrap();
    let d = Dataset::load(dir.path()).unwrap();
    (dir, d)
}

#[test]
fn oracle_reproduces_record_boxes() {
    let (_dir, d) = dataset();
    for r in &d.records {
        for dir in [Direction::Delete, Direction::Add] {
            let out = localize(&r.image_before, r.user_prompt(dir), Backend::Oracle(Some((r, dir)))).unwrap();
            assert_eq!(bbox_iou(&out.bbox, &r.bbox), 1.0);
            assert_eq!(out.instruct_prompt, r.instruct(dir));
        }
        let sets = annotate_pair(&r.composite().unwrap(), Backend::Oracle(Some((r, Direction::Delete)))).unwrap();
        assert_eq!(sets, r.prompt_sets());
    }
    let r = &d.records[0];
    assert!(matches!(localize(&r.image_before, "  ", Backend::Oracle(Some((r, Direction::Delete)))), Err(Error::Empty(_))));
    assert!(matches!(localize(&r.image_before, "remove", Backend::Oracle(None)), Err(Error::MissingRecordContext)));
}

#[test]
fn remote_client_round_trips_against_mock() {
    let (_dir, d) = dataset();
    let r = &d.records[0];
    let server = MockServer::start("127.0.0.1:0", MockReplies::default()).unwrap();
    let client = RemoteClient::new(&server.url(), Duration::from_secs(5));

    let out = localize(&r.image_before, "take the bump off", Backend::Remote(&client)).unwrap();
    assert_eq!(out.bbox.to_array(), [0.1, 0.1, 0.4, 0.4]);
    assert_eq!(out.instruct_prompt, "Remove the boss");
    let sets = annotate_pair(&r.composite().unwrap(), Backend::Remote(&client)).unwrap();
    assert_eq!(sets.instructs_fwd.len(), PROMPT_COUNT);
    assert_eq!(sets.instructs_rev.len(), PROMPT_COUNT);
    assert!(sets.summary_fwd.starts_with("Remove"));

    // Malformed replies surface as MalformedReply, not transport errors.
    for bad in [
        json!({"bbox": [0.1, 0.2, 0.3], "instruct": "x"}),
        json!({"bbox": [0.1, 0.2, 1.4, 0.5], "instruct": "x"}),
        json!({"bbox": [0.1, 0.2, 0.3, 0.5], "instruct": ""}),
        json!({"box": [0.1, 0.2, 0.3, 0.5]}),
    ] {
        server.set_replies(MockReplies { localize: bad.clone(), ..MockReplies::default() });
        let e = client.localize(&r.image_before, "remove it").unwrap_err();
        assert!(matches!(e, Error::MalformedReply(_)), "{bad}: {e:?}");
    }
    server.set_replies(MockReplies { annotate: json!({"text": "## Something else\n1. hi"}), ..MockReplies::default() });
    assert!(matches!(client.annotate(&r.composite().unwrap()), Err(Error::MalformedReply(_))));
}

#[test]
fn unreachable_or_silent_endpoints_are_transport_errors() {
    let (_dir, d) = dataset();
    let img = &d.records[0].image_before;
    // Nothing listens on a freshly released port.
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let client = RemoteClient::new(&format!("http://127.0.0.1:{port}"), Duration::from_secs(2));
    assert!(matches!(client.localize(img, "remove it"), Err(Error::Transport(_))));

    // A listener that never answers: the deadline bounds the wait.
    let silent = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let client = RemoteClient::new(&format!("http://{}", silent.local_addr().unwrap()), Duration::from_millis(300));
    let t = Instant::now();
    assert!(matches!(client.localize(img, "remove it"), Err(Error::Transport(_))));
    assert!(t.elapsed() < Duration::from_secs(5));
}
