use std::path::Path;
use std::time::{Duration, Instant};

use inpaint_core::imaging::{encode_mask_png, encode_png, Mask};
use inpaint_core::models::{save_bundle, ArchConfig, ModelBundle};
use inpaint_core::synth::synth_faces;
use inpaint_service::multipart::{encode, Part};
use inpaint_service::{RunningServer, ServiceConfig};
use serde_json::Value;

const BOUNDARY: &str = "----inpaint-test-boundary";

fn toy_arch(resolution: usize, base_channels: usize) -> ArchConfig {
    ArchConfig {
        resolution,
        latent_dim: 16,
        base_channels,
        refiner_width: 2,
        disc_blocks: 2,
        disc_width: 8,
        ..Default::default()
    }
}

struct Fixture {
    root: tempfile::TempDir,
}

impl Fixture {
    fn new() -> Self {
        let root = tempfile::tempdir().unwrap();
        let bundles = root.path().join("bundles");
        std::fs::create_dir_all(&bundles).unwrap();
        save_bundle(&ModelBundle::init(toy_arch(32, 4), 1).unwrap(), &bundles.join("toy.ckpt")).unwrap();
        Self { root }
    }

    fn runs(&self) -> std::path::PathBuf {
        self.root.path().join("runs")
    }

    fn config(&self, bundle: Option<&str>, workers: usize) -> ServiceConfig {
        let mut cfg = ServiceConfig::new(self.runs(), self.root.path().join("bundles"));
        cfg.listen = "127.0.0.1:0".parse().unwrap();
        cfg.bundle = bundle.map(String::from);
        cfg.workers = workers;
        cfg
    }

    fn start(&self, bundle: Option<&str>) -> RunningServer {
        RunningServer::start(self.config(bundle, 1)).unwrap()
    }
}

fn agent() -> ureq::Agent {
    ureq::Agent::config_builder().http_status_as_error(false).build().into()
}

fn get(url: &str) -> (u16, Vec<u8>) {
    let mut r = agent().get(url).call().unwrap();
    (r.status().as_u16(), r.body_mut().with_config().limit(1 << 26).read_to_vec().unwrap())
}

fn get_json(url: &str) -> (u16, Value) {
    let (s, b) = get(url);
    (s, serde_json::from_slice(&b).unwrap())
}

fn post_empty(url: &str) -> (u16, Value) {
    let mut r = agent().post(url).send_empty().unwrap();
    let status = r.status().as_u16();
    (status, serde_json::from_str(&r.body_mut().read_to_string().unwrap()).unwrap())
}

fn file(name: &str, data: Vec<u8>) -> Part {
    Part {
        name: name.into(),
        filename: Some(format!("{name}.png")),
        content_type: Some("image/png".into()),
        data,
    }
}

fn field(name: &str, value: &str) -> Part {
    Part {
        name: name.into(),
        filename: None,
        content_type: None,
        data: value.as_bytes().to_vec(),
    }
}

fn post_job(server: &RunningServer, parts: &[Part]) -> (u16, Value) {
    let mut r = agent()
        .post(format!("{}/api/jobs", server.url()))
        .header("Content-Type", format!("multipart/form-data; boundary={BOUNDARY}"))
        .send(&encode(BOUNDARY, parts)[..])
        .unwrap();
    let status = r.status().as_u16();
    (status, serde_json::from_str(&r.body_mut().read_to_string().unwrap()).unwrap())
}

fn inputs(size: usize) -> Vec<Part> {
    let img = synth_faces(1, size, 5).remove(0);
    let mask = Mask::from_fn(size, size, |y, x| !(y >= size / 4 && y < size / 2 && x >= size / 4 && x < 3 * size / 4));
    vec![file("image", encode_png(&img).unwrap()), file("mask", encode_mask_png(&mask).unwrap())]
}

fn with(mut parts: Vec<Part>, fields: &[(&str, &str)]) -> Vec<Part> {
    parts.extend(fields.iter().map(|(k, v)| field(k, v)));
    parts
}

fn wait_done(server: &RunningServer, id: &str) -> Value {
    let deadline = Instant::now() + Duration::from_secs(120);
    loop {
        let (s, v) = get_json(&format!("{}/api/jobs/{id}", server.url()));
        assert_eq!(s, 200);
        match v["state"].as_str().unwrap() {
            "done" => return v,
            "failed" => panic!("job failed: {v}"),
            _ => {}
        }
        assert!(Instant::now() < deadline, "job {id} did not finish");
        std::thread::sleep(Duration::from_millis(20));
    }
}

fn urls(v: &Value) -> Vec<String> {
    let u = &v["urls"];
    let mut out: Vec<String> = ["input", "mask", "coarse", "refined"]
        .iter()
        .filter_map(|k| u[k].as_str().map(String::from))
        .collect();
    for k in ["cycles", "refined_cycles"] {
        if let Some(list) = u[k].as_array() {
            out.extend(list.iter().map(|x| x.as_str().unwrap().to_string()));
        }
    }
    out
}

/// Maps an artifact URL to the file the engine wrote for it.
fn disk_file(runs: &Path, id: &str, url: &str) -> std::path::PathBuf {
    let rest = url.strip_prefix(&format!("/api/jobs/{id}/")).unwrap();
    let name = if let Some(i) = rest.strip_prefix("cycles/") {
        format!("cycle_{i}")
    } else if let Some(i) = rest.strip_prefix("refined/") {
        format!("refined_{i}")
    } else {
        rest.to_string()
    };
    runs.join(id).join(name)
}

#[test]
fn submit_poll_and_fetch_artifacts() {
    let fx = Fixture::new();
    let server = fx.start(Some("toy"));
    let (s, v) = post_job(&server, &with(inputs(32), &[("cycles", "4"), ("use_discriminator", "true"), ("refine", "true"), ("seed", "3")]));
    assert_eq!(s, 202, "{v}");
    let id = v["job_id"].as_str().unwrap().to_string();
    let done = wait_done(&server, &id);
    assert_eq!(done["progress"], 4);
    assert_eq!(done["scores"].as_array().unwrap().len(), 4);
    let sel = done["selected_cycle"].as_u64().unwrap();
    assert!(sel < 4);
    assert_eq!(done["urls"]["cycles"].as_array().unwrap().len(), 4);
    assert!(done["urls"]["coarse"].is_string() && done["urls"]["refined"].is_string());

    for url in urls(&done) {
        let (status, bytes) = get(&format!("{}{url}", server.url()));
        assert_eq!(status, 200, "{url}");
        assert_eq!(bytes, std::fs::read(disk_file(&fx.runs(), &id, &url)).unwrap(), "{url}");
    }
    // coarse is the selected cycle
    assert_eq!(
        get(&format!("{}/api/jobs/{id}/coarse.png", server.url())).1,
        get(&format!("{}/api/jobs/{id}/cycles/{sel}.png", server.url())).1
    );

    assert_eq!(get(&format!("{}/api/jobs/job-999999", server.url())).0, 404);
    assert_eq!(get(&format!("{}/api/jobs/{id}/cycles/4.png", server.url())).0, 404);
    assert_eq!(get(&format!("{}/api/jobs/{id}/cycles/x.png", server.url())).0, 404);
    assert_eq!(get(&format!("{}/api/jobs/{id}/nothing.png", server.url())).0, 404);
    assert_eq!(get(&format!("{}/api/jobs/{id}/refined/0.png", server.url())).0, 404);

    let (s, list) = get_json(&format!("{}/api/jobs", server.url()));
    assert_eq!(s, 200);
    assert_eq!(list["jobs"], serde_json::json!([id]));
}

#[test]
fn multi_result_mode_has_no_scores_or_selection() {
    let fx = Fixture::new();
    let server = fx.start(Some("toy"));
    let (s, v) = post_job(&server, &with(inputs(32), &[("cycles", "3"), ("use_discriminator", "false"), ("refine", "true")]));
    assert_eq!(s, 202, "{v}");
    let id = v["job_id"].as_str().unwrap().to_string();
    let done = wait_done(&server, &id);
    assert!(done.get("scores").is_none());
    assert!(done.get("selected_cycle").is_none());
    assert_eq!(done["urls"]["cycles"].as_array().unwrap().len(), 3);
    assert_eq!(done["urls"]["refined_cycles"].as_array().unwrap().len(), 3);
    assert_eq!(get(&format!("{}/api/jobs/{id}/coarse.png", server.url())).0, 404);
    assert_eq!(get(&format!("{}/api/jobs/{id}/refined.png", server.url())).0, 404);
    for url in urls(&done) {
        let (status, bytes) = get(&format!("{}{url}", server.url()));
        assert_eq!(status, 200, "{url}");
        assert_eq!(bytes, std::fs::read(disk_file(&fx.runs(), &id, &url)).unwrap());
    }

    // refine off: no refined artifacts at all
    let (_, v) = post_job(&server, &with(inputs(32), &[("cycles", "2"), ("use_discriminator", "true"), ("refine", "false")]));
    let id = v["job_id"].as_str().unwrap().to_string();
    let done = wait_done(&server, &id);
    assert!(done["urls"].get("refined").is_none());
    assert_eq!(get(&format!("{}/api/jobs/{id}/refined.png", server.url())).0, 404);
    assert_eq!(get(&format!("{}/api/jobs/{id}/coarse.png", server.url())).0, 200);
}

#[test]
fn bad_submissions_are_rejected() {
    let fx = Fixture::new();
    let idle = fx.start(None);
    let (s, v) = post_job(&idle, &inputs(32));
    assert_eq!(s, 409, "{v}");
    drop(idle);

    let server = fx.start(Some("toy"));
    let expect = |parts: Vec<Part>, field: &str| {
        let (s, v) = post_job(&server, &parts);
        assert_eq!(s, 400, "{v}");
        assert_eq!(v["field"], field, "{v}");
        assert!(v["error"].as_str().unwrap().contains(field));
    };

    let small_mask = Mask::ones(16, 16);
    let mut parts = inputs(32);
    parts[1] = file("mask", encode_mask_png(&small_mask).unwrap());
    expect(parts, "mask");
    expect(with(inputs(32), &[("fill", "constant")]), "constant_color");
    expect(with(inputs(32), &[("fill", "constant"), ("constant_color", "1,2")]), "constant_color");
    expect(with(inputs(32), &[("fill", "plaid")]), "fill");
    expect(with(inputs(32), &[("cycles", "0")]), "cycles");
    expect(with(inputs(32), &[("cycles", "many")]), "cycles");
    expect(with(inputs(32), &[("use_discriminator", "maybe")]), "use_discriminator");
    expect(with(inputs(32), &[("colour", "red")]), "colour");
    expect(inputs(32)[..1].to_vec(), "mask");
    let mut parts = inputs(32);
    parts[0].data = b"not an image".to_vec();
    expect(parts, "image");
    expect(with(inputs(32), &[("fill", "sketch")]), "sketch");

    let (s, _) = agent()
        .post(format!("{}/api/jobs", server.url()))
        .header("Content-Type", "application/json")
        .send("{}")
        .map(|r| (r.status().as_u16(), ()))
        .unwrap();
    assert_eq!(s, 400);

    // non-square inputs are resized to the bundle resolution
    let img = synth_faces(1, 48, 2).remove(0).resize_bilinear(40, 48);
    let parts = with(
        vec![file("image", encode_png(&img).unwrap()), file("mask", encode_mask_png(&Mask::from_fn(40, 48, |y, _| y < 20)).unwrap())],
        &[("cycles", "1"), ("fill", "constant"), ("constant_color", "0.5,0,-0.5")],
    );
    let (s, v) = post_job(&server, &parts);
    assert_eq!(s, 202, "{v}");
    wait_done(&server, v["job_id"].as_str().unwrap());
}

#[test]
fn bundle_registry_endpoints() {
    let fx = Fixture::new();
    std::fs::write(fx.root.path().join("bundles/broken.ckpt"), b"garbage").unwrap();
    let server = fx.start(None);
    let (s, v) = get_json(&format!("{}/api/bundles", server.url()));
    assert_eq!(s, 200);
    let list = v["bundles"].as_array().unwrap();
    assert_eq!(list.len(), 2);
    assert!(list.iter().all(|b| b["loaded"] == false));
    assert!(v["active"].is_null());

    let (s, v) = post_empty(&format!("{}/api/bundles/toy/load", server.url()));
    assert_eq!(s, 200, "{v}");
    assert_eq!(v["resolution"], 32);
    let (_, v) = get_json(&format!("{}/api/bundles", server.url()));
    let toy = v["bundles"].as_array().unwrap().iter().find(|b| b["name"] == "toy").unwrap().clone();
    assert_eq!(toy["loaded"], true);
    assert_eq!(v["active"], "toy");

    let (s, _) = post_empty(&format!("{}/api/bundles/broken/load", server.url()));
    assert_eq!(s, 422);
    let (_, v) = get_json(&format!("{}/api/bundles", server.url()));
    assert_eq!(v["active"], "toy");
    assert_eq!(post_empty(&format!("{}/api/bundles/absent/load", server.url())).0, 404);
    assert_eq!(post_empty(&format!("{}/api/bundles/..%2Ftoy/load", server.url())).0, 404);

    // jobs run against whichever bundle is active
    let (s, v) = post_job(&server, &with(inputs(32), &[("cycles", "1")]));
    assert_eq!(s, 202);
    assert_eq!(wait_done(&server, v["job_id"].as_str().unwrap())["bundle"], "toy");
}

#[test]
fn restart_reindexes_and_replay_is_identical() {
    let fx = Fixture::new();
    let server = fx.start(Some("toy"));
    let (_, v) = post_job(&server, &with(inputs(32), &[("cycles", "3"), ("use_discriminator", "true"), ("refine", "true"), ("fill", "noise"), ("seed", "9")]));
    let id = v["job_id"].as_str().unwrap().to_string();
    let before = wait_done(&server, &id);
    server.stop();

    // an interrupted job directory is reported as failed
    std::fs::create_dir_all(fx.runs().join("job-000042")).unwrap();

    let server = fx.start(Some("toy"));
    let after = wait_done(&server, &id);
    assert_eq!(before, after);
    let (_, failed) = get_json(&format!("{}/api/jobs/job-000042", server.url()));
    assert_eq!(failed["state"], "failed");
    assert!(failed["error"].as_str().unwrap().contains("interrupted"));

    let (s, v) = post_empty(&format!("{}/api/jobs/{id}/replay", server.url()));
    assert_eq!(s, 202, "{v}");
    let new_id = v["job_id"].as_str().unwrap().to_string();
    assert_eq!(new_id, "job-000043");
    let replayed = wait_done(&server, &new_id);
    assert_eq!(replayed["scores"], before["scores"]);
    assert_eq!(replayed["selected_cycle"], before["selected_cycle"]);
    for f in ["cycle_0.png", "cycle_1.png", "cycle_2.png", "coarse.png", "refined.png", "input.png", "mask.png"] {
        assert_eq!(
            std::fs::read(fx.runs().join(&id).join(f)).unwrap(),
            std::fs::read(fx.runs().join(&new_id).join(f)).unwrap(),
            "{f}"
        );
    }
    assert_eq!(post_empty(&format!("{}/api/jobs/job-000042/replay", server.url())).0, 409);
    assert_eq!(post_empty(&format!("{}/api/jobs/job-000077/replay", server.url())).0, 404);
}

#[test]
fn progress_is_monotonic_and_pending_cycles_conflict() {
    let fx = Fixture::new();
    save_bundle(&ModelBundle::init(toy_arch(64, 16), 2).unwrap(), &fx.root.path().join("bundles/slow.ckpt")).unwrap();
    let server = fx.start(Some("slow"));
    let total = 60;
    let (_, v) = post_job(&server, &with(inputs(64), &[("cycles", &total.to_string()), ("use_discriminator", "true")]));
    let long = v["job_id"].as_str().unwrap().to_string();
    let (_, v) = post_job(&server, &with(inputs(64), &[("cycles", "2"), ("refine", "false")]));
    let queued = v["job_id"].as_str().unwrap().to_string();

    // the single worker is busy with the long job
    let (_, q) = get_json(&format!("{}/api/jobs/{queued}", server.url()));
    assert_eq!(q["state"], "queued");
    assert_eq!(get(&format!("{}/api/jobs/{queued}/cycles/0.png", server.url())).0, 409);
    assert_eq!(get(&format!("{}/api/jobs/{queued}/coarse.png", server.url())).0, 409);
    assert_eq!(get(&format!("{}/api/jobs/{queued}/refined.png", server.url())).0, 404);
    assert_eq!(get(&format!("{}/api/jobs/{queued}/input.png", server.url())).0, 200);

    let mut last = 0;
    let mut saw_running = false;
    let mut checked_partial = false;
    loop {
        let (_, v) = get_json(&format!("{}/api/jobs/{long}", server.url()));
        let p = v["progress"].as_u64().unwrap();
        assert!(p >= last, "progress went from {last} to {p}");
        last = p;
        if v["state"] == "running" {
            saw_running = true;
            if p > 0 && p < total && !checked_partial {
                assert_eq!(get(&format!("{}/api/jobs/{long}/cycles/{}.png", server.url(), p - 1)).0, 200);
                assert_eq!(get(&format!("{}/api/jobs/{long}/cycles/{}.png", server.url(), total - 1)).0, 409);
                assert_eq!(get(&format!("{}/api/jobs/{long}/coarse.png", server.url())).0, 409);
                assert_eq!(v["urls"]["cycles"].as_array().unwrap().len() as u64, p);
                checked_partial = true;
            }
        }
        if v["state"] == "done" {
            break;
        }
        std::thread::sleep(Duration::from_millis(5));
    }
    assert!(saw_running && checked_partial);
    assert_eq!(last, total);
    wait_done(&server, &queued);
}
