use std::sync::OnceLock;
use std::time::{Duration, Instant};

use brepler_core::brep::{parse_brep, serialize_brep};
use brepler_core::modifier::{EditOptions, ModifierParams};
use brepler_core::pipeline::{edit_record, overfit_config, train_on_dataset, Localizer};
use brepler_core::render::Image;
use brepler_core::service::{model_id, JobState, JobStatus, RunningService, ServiceState};
use brepler_core::synth::{build_dataset, Dataset, Direction, Split};
use serde_json::{json, Value};
use tempfile::TempDir;

struct Fixture {
    _dir: TempDir,
    data: Dataset,
    params: ModifierParams,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = TempDir::new().unwrap();
        build_dataset(10, 5, dir.path(), 1).unwrap();
        let data = Dataset::load(dir.path()).unwrap();
        let (params, _) = train_on_dataset(&data, &overfit_config(0, 1, 600), Some(1)).unwrap();
        Fixture { _dir: dir, data, params }
    })
}

fn agent() -> ureq::Agent {
    ureq::Agent::config_builder().http_status_as_error(false).build().into()
}

fn get(url: &str) -> (u16, Vec<u8>) {
    let resp = agent().get(url).call().unwrap();
    let status = resp.status().as_u16();
    (status, resp.into_body().read_to_vec().unwrap())
}

fn get_json(url: &str) -> (u16, Value) {
    let (status, body) = get(url);
    (status, serde_json::from_slice(&body).expect("JSON body"))
}

fn post_json(url: &str, body: &Value) -> (u16, Value) {
    let resp = agent().post(url).send_json(body).unwrap();
    let status = resp.status().as_u16();
    (status, serde_json::from_slice(&resp.into_body().read_to_vec().unwrap()).unwrap())
}

fn start(params: Option<ModifierParams>, workers: usize) -> RunningService {
    let mut state = ServiceState::new(params, None, workers);
    state.add_dataset(&fixture().data);
    RunningService::start("127.0.0.1:0", state).unwrap()
}

fn wait_job(base: &str, job: &str) -> JobState {
    let t = Instant::now();
    loop {
        let (status, v) = get_json(&format!("{base}/jobs/{job}"));
        assert_eq!(status, 200);
        let state: JobState = serde_json::from_value(v).unwrap();
        if matches!(state.status, JobStatus::Done | JobStatus::Failed) {
            return state;
        }
        assert!(t.elapsed() < Duration::from_secs(120), "job {job} stuck");
        std::thread::sleep(Duration::from_millis(20));
    }
}

fn submit(base: &str, id: &str) -> String {
    let (status, v) = post_json(&format!("{base}/edit"), &json!({ "model_id": id, "prompt": "remove the feature", "localizer": "oracle" }));
    assert_eq!(status, 202, "{v}");
    v["job_id"].as_str().unwrap().to_owned()
}

#[test]
fn model_routes() {
    let svc = start(None, 1);
    let base = svc.url();
    let (status, list) = get_json(&format!("{base}/models"));
    assert_eq!(status, 200);
    let list = list.as_array().unwrap().clone();
    assert_eq!(list.len(), 20);
    let m = &fixture().data.records[0].model_before;
    let id = model_id(m);
    let entry = list.iter().find(|e| e["id"] == id.as_str()).expect("record model listed");
    assert_eq!(entry["face_count"], m.face_count());

    let (status, text) = get(&format!("{base}/models/{id}"));
    assert_eq!(status, 200);
    assert_eq!(parse_brep(std::str::from_utf8(&text).unwrap()).unwrap(), *m);

    let (status, mesh) = get_json(&format!("{base}/models/{id}/mesh"));
    assert_eq!(status, 200);
    let tris = mesh["triangles"].as_array().unwrap().len();
    assert_eq!(tris, m.face_count() * 18);
    assert_eq!(mesh["face_of_triangle"].as_array().unwrap().len(), tris);
    assert!(!mesh["positions"].as_array().unwrap().is_empty());

    let (status, pgm) = get(&format!("{base}/models/{id}/render?dir=1,0.5,0.2"));
    assert_eq!(status, 200);
    let img = Image::from_pgm(&pgm).unwrap();
    assert_eq!((img.width(), img.height()), (224, 224));
    let (status, v) = get_json(&format!("{base}/models/{id}/render?dir=1,2"));
    assert_eq!(status, 400);
    assert!(v["error"].is_string());

    for path in ["/models/deadbeef", "/models/deadbeef/mesh", "/jobs/job-999999", "/nowhere"] {
        let (status, v) = get_json(&format!("{base}{path}"));
        assert_eq!(status, 404, "{path}");
        assert!(v["error"].is_string(), "{path}");
    }

    // Uploads are content addressed.
    let resp = agent().post(&format!("{base}/models")).send(serialize_brep(m)).unwrap();
    assert_eq!(resp.status().as_u16(), 201);
    let v: Value = serde_json::from_slice(&resp.into_body().read_to_vec().unwrap()).unwrap();
    assert_eq!(v["id"], id.as_str());
    let resp = agent().post(&format!("{base}/models")).send("nope").unwrap();
    assert_eq!(resp.status().as_u16(), 400);
}

#[test]
fn edit_requests_are_validated() {
    let svc = start(None, 1);
    let base = svc.url();
    let (status, _) = post_json(&format!("{base}/edit"), &json!({ "model_id": "x", "prompt": "p", "localizer": "oracle", "extra": 1 }));
    assert_eq!(status, 400);
    let (status, _) = post_json(&format!("{base}/edit"), &json!({ "model_id": "x", "prompt": "p", "localizer": "oracle" }));
    assert_eq!(status, 404);
}

#[test]
fn job_without_checkpoint_fails() {
    let svc = start(None, 1);
    let id = model_id(&fixture().data.records[0].model_before);
    let job = submit(&svc.url(), &id);
    let state = wait_job(&svc.url(), &job);
    assert_eq!(state.status, JobStatus::Failed);
    assert!(state.error.unwrap().contains("checkpoint"));
}

#[test]
fn remote_job_without_endpoint_fails() {
    let f = fixture();
    let svc = start(Some(f.params.clone()), 1);
    let id = model_id(&f.data.records[0].model_before);
    let (_, v) = post_json(&format!("{}/edit", svc.url()), &json!({ "model_id": id, "prompt": "remove it", "localizer": "remote", "view_dir": [1.0, 1.0, 1.0] }));
    let state = wait_job(&svc.url(), v["job_id"].as_str().unwrap());
    assert_eq!(state.status, JobStatus::Failed);
}

#[test]
fn edit_job_on_the_trained_record_succeeds() {
    let f = fixture();
    let svc = start(Some(f.params.clone()), 2);
    let record = f.data.split(Split::Train)[0];
    let job = submit(&svc.url(), &model_id(&record.model_before));
    assert!(job.starts_with("job-"));
    let state = wait_job(&svc.url(), &job);
    assert_eq!(state.status, JobStatus::Done, "{:?}", state.error);
    let result = state.result.unwrap();
    assert_eq!(result.bbox, record.bbox.to_array());
    assert_eq!(result.instruct_prompt, record.instruct(Direction::Delete));
    let metrics = result.metrics.expect("record context gives metrics");
    assert!(metrics.success);
    assert!(result.validity.valid);
    // The edited model is registered and retrievable.
    let (status, _) = get(&format!("{}/models/{}", svc.url(), result.model_id));
    assert_eq!(status, 200);
}

#[test]
fn concurrent_jobs_match_serial_edits() {
    let f = fixture();
    let svc = start(Some(f.params.clone()), 4);
    let records: Vec<_> = f.data.records.iter().take(8).collect();
    let jobs: Vec<String> = records.iter().map(|r| submit(&svc.url(), &model_id(&r.model_before))).collect();
    for (r, job) in records.iter().zip(&jobs) {
        let state = wait_job(&svc.url(), job);
        let serial = edit_record(r, Direction::Delete, &f.params, Localizer::Oracle, &EditOptions::default());
        match serial.outcome {
            Ok(o) => {
                assert_eq!(state.status, JobStatus::Done, "{}: {:?}", r.record_id, state.error);
                assert_eq!(state.result.unwrap().model_id, model_id(&o.model));
            }
            Err(msg) => {
                assert_eq!(state.status, JobStatus::Failed);
                assert_eq!(state.error.unwrap(), msg);
            }
        }
    }
}
