mod common;

use std::time::{Duration, Instant};

use cbir_core::synthgen::{generate, SynthConfig};
use common::{inline_ingest, small_synth, start_server, write_synth, Client};
use serde_json::{json, Value};

fn train_build(mode: &str) -> Value {
    json!({ "mode": mode, "index": { "kind": "flat" }, "router": { "train": { "epochs": 10 } } })
}

#[test]
fn reference_pair_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_synth(dir.path(), &SynthConfig::reference());
    let server = start_server();
    let c = Client::new(&server);

    assert_eq!(c.get("/v1/healthz").0, 503);
    let (st, body) = c.post("/v1/search", &json!({ "embedding": vec![0.1; 64] }));
    assert_eq!(st, 503, "{body}");

    let paths = json!({
        "embeddings_path": dir.path().join("embeddings.cemb"),
        "catalog_path": dir.path().join("catalog.jsonl"),
    });
    let (st, body) = c.post("/v1/ingest", &paths);
    assert_eq!(st, 200, "{body}");
    assert_eq!(body["summary"]["catalog_images"], 32_000);
    assert_eq!(body["summary"]["query_images"], 9_600);

    // cascade without any router known to the service
    let (st, body) = c.post("/v1/build", &json!({ "mode": "cascade" }));
    assert_eq!(st, 422, "{body}");
    assert_eq!(body["error"]["code"], "unprocessable");
    assert_eq!(c.get("/v1/healthz").0, 503);

    let (st, built) = c.post("/v1/build", &train_build("both"));
    assert_eq!(st, 200, "{built}");
    assert_eq!(built["build_version"], 1);
    assert_eq!(built["partitions"].as_array().unwrap().len(), 32);
    assert_eq!(built["baseline_count"], 32_000);
    let (st, h) = c.get("/v1/healthz");
    assert_eq!((st, h["build_version"].as_u64()), (200, Some(1)));

    // stored catalog vector comes back first with score 1
    let img = data.catalog.images()[17];
    let v: Vec<f32> = data.embeddings.get(img.image_id).unwrap().to_vec();
    let (st, body) = c.post("/v1/search", &json!({ "embedding": v, "mode": "baseline", "k": 5 }));
    assert_eq!(st, 200, "{body}");
    assert_eq!(body["results"][0]["image_id"], img.image_id);
    assert_eq!(body["results"][0]["product_id"], img.product_id);
    assert!((body["results"][0]["score"].as_f64().unwrap() - 1.0).abs() < 1e-6);
    assert_eq!(body["results"].as_array().unwrap().len(), 5);
    assert_eq!(body["build_version"], 1);

    let (st, body) = c.post("/v1/search", &json!({ "embedding": v, "mode": "cascade", "route_top_m": 1 }));
    assert_eq!(st, 200);
    assert_eq!(body["trace"]["routed"].as_array().unwrap().len(), 1);

    // bad vectors
    let (st, body) = c.post("/v1/search", &json!({ "embedding": vec![0.0; 64] }));
    assert_eq!(st, 400);
    assert_eq!(body["error"]["code"], "bad_request");
    assert_eq!(c.post("/v1/search", &json!({ "embedding": vec![1.0; 63] })).0, 400);
    assert_eq!(c.post("/v1/search", &json!({ "embedding": vec![1e39; 64] })).0, 400);
    assert_eq!(c.post_raw("/v1/search", "{\"embedding\": [1, 2,").0, 400);
    assert_eq!(c.post("/v1/search", &json!({ "embedding": v, "k": 0 })).0, 400);

    // identical rebuild: new version, same counts, router reused
    let (st, rebuilt) = c.post("/v1/build", &json!({ "mode": "both" }));
    assert_eq!(st, 200, "{rebuilt}");
    assert_eq!(rebuilt["build_version"], 2);
    assert_eq!(rebuilt["partitions"], built["partitions"]);
    assert_eq!(rebuilt["baseline_count"], built["baseline_count"]);
    let (_, third) = c.post("/v1/build", &json!({ "mode": "baseline" }));
    assert_eq!(third["build_version"], 3);

    let (st, stats) = c.get("/v1/stats");
    assert_eq!(st, 200);
    assert_eq!(stats["build_version"], 3);
    assert!(stats["searches"].as_u64().unwrap() >= 2);
    server.shutdown();
}

#[test]
fn ingest_errors() {
    let server = start_server();
    let c = Client::new(&server);
    let d = generate(&small_synth(3)).unwrap();

    // catalog missing one image the embeddings have
    let images: Vec<_> = d.catalog.images()[1..].to_vec();
    let short = cbir_core::catalog::Catalog::new(images).unwrap();
    let (st, body) = c.post("/v1/ingest", &inline_ingest(&short, &d.embeddings));
    assert_eq!(st, 400, "{body}");
    let missing = body["error"]["detail"]["missing_catalog"].as_array().unwrap();
    assert_eq!(missing, &vec![json!(d.catalog.images()[0].image_id)]);

    assert_eq!(c.post("/v1/ingest", &json!({ "catalog_jsonl": "" })).0, 400);
    assert_eq!(c.post("/v1/ingest", &json!({ "embeddings_b64": "!!", "catalog_jsonl": "" })).0, 400);
    assert_eq!(c.post("/v1/ingest", &json!({ "embeddings_path": "/no/such/file", "catalog_path": "/x" })).0, 400);

    let (st, body) = c.post("/v1/build", &json!({ "mode": "baseline" }));
    assert_eq!(st, 409, "{body}");
    assert_eq!(body["error"]["code"], "not_ingested");
}

#[test]
fn concurrent_build_and_ingest_rejected() {
    let server = start_server();
    let c = Client::new(&server);
    let big = generate(&SynthConfig::reference()).unwrap();
    assert_eq!(c.post("/v1/ingest", &inline_ingest(&big.catalog, &big.embeddings)).0, 200);

    let slow = json!({
        "mode": "both",
        "index": { "kind": "hnsw", "m": 16, "ef_construction": 200 },
        "router": { "train": { "epochs": 5 } },
    });
    let addr = server.addr();
    let builder = std::thread::spawn(move || {
        let http = reqwest::blocking::Client::builder().timeout(Duration::from_secs(600)).build().unwrap();
        let r = http.post(format!("http://{addr}/v1/build")).json(&slow).send().unwrap();
        r.status().as_u16()
    });
    let deadline = Instant::now() + Duration::from_secs(60);
    while !c.get("/v1/stats").1["building"].as_bool().unwrap() {
        assert!(Instant::now() < deadline, "build never started");
        std::thread::sleep(Duration::from_millis(5));
    }
    let (st, body) = c.post("/v1/build", &json!({ "mode": "baseline" }));
    assert_eq!(st, 409, "{body}");
    assert_eq!(body["error"]["code"], "build_in_progress");
    let small = generate(&small_synth(1)).unwrap();
    assert_eq!(c.post("/v1/ingest", &inline_ingest(&small.catalog, &small.embeddings)).0, 409);
    assert_eq!(builder.join().unwrap(), 200);
    assert_eq!(c.get("/v1/healthz").0, 200);
}

#[test]
fn router_file_build() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_synth(5);
    let d = write_synth(dir.path(), &cfg);
    // train a router through the CLI, then hand the file to the service
    let rdir = dir.path().join("r");
    let code = cbir::cli::run([
        "cbir", "train-router", "--data", dir.path().to_str().unwrap(), "--out", rdir.to_str().unwrap(),
    ]);
    assert_eq!(code, 0);
    let server = cbir::service::spawn("127.0.0.1:0".parse().unwrap(), Some(dir.path().to_path_buf())).unwrap();
    let c = Client::new(&server);
    // --data preloads the directory, so build works without an ingest
    let (st, body) = c.post("/v1/build", &json!({ "mode": "cascade", "router": { "file": "r/router.json" } }));
    assert_eq!(st, 200, "{body}");
    assert_eq!(body["partitions"].as_array().unwrap().len(), 8);
    assert!(body["router_training"]["heldout_accuracy"].as_f64().is_some());
    let q = d.embeddings.row(0).to_vec();
    let (st, body) = c.post("/v1/search", &json!({ "embedding": q, "mode": "baseline" }));
    assert_eq!(st, 503, "{body}");
    let (st, body) = c.post("/v1/search", &json!({ "embedding": q, "route_top_m": 3 }));
    assert_eq!(st, 200, "{body}");
    assert_eq!(body["trace"]["routed"].as_array().unwrap().len(), 3);

    // a router for other classes does not cover this catalog
    let mut wrong = cbir_core::router::SoftmaxRouter::zeros(vec![100, 101], cfg.dim).unwrap();
    wrong.bias[0] = 1.0;
    cbir::formats::router_file::save_router(
        &dir.path().join("wrong.json"),
        &cbir::formats::router_file::RouterFile::new(&wrong, None),
    )
    .unwrap();
    let (st, body) = c.post("/v1/build", &json!({ "mode": "cascade", "router": { "file": "wrong.json" } }));
    assert_eq!(st, 422, "{body}");
    assert_eq!(c.get("/v1/healthz").1["build_version"], 1);
}
