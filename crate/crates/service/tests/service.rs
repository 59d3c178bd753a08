use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use mdvae::chem::{AtomRegistry, MolecularGraph};
use mdvae::dataset::{BuiltinProperty, PropertySpec};
use mdvae::evaluation::linspace;
use mdvae::heads::{Group, GroupSpec};
use mdvae::model::{Model, ModelConfig};
use mdvae::training::{Checkpoint, TrainConfig};
use mdvae_service::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use tower::ServiceExt;

fn specs(j: usize) -> Vec<PropertySpec> {
    (0..j)
        .map(|i| {
            let mut s = PropertySpec::column(&format!("p{i}"));
            s.mean = i as f64;
            s.std = 2.0;
            s
        })
        .collect()
}

fn loaded_with(groups: GroupSpec, latent: usize, seed: u64) -> Loaded {
    let j = groups.num_properties();
    let cfg = ModelConfig { hidden: 10, latent, steps: 2, degree: 3 };
    let model = Model::new(cfg, AtomRegistry::qm9(), groups, seed).unwrap();
    Loaded::new(model, specs(j), vec![0, 1, 2, 4, 4, 3, 2, 2, 1, 1])
}

fn loaded(j: usize) -> Loaded {
    loaded_with(GroupSpec::singletons(j), 6, 7)
}

async fn call(state: &AppState, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri).header("content-type", "application/json");
    let req = match body {
        Some(b) => req.body(Body::from(b.to_string())).unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = router(state.clone(), None).oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

async fn seed(state: &AppState, body: Value) -> Value {
    let (s, v) = call(state, "POST", "/api/seed", Some(body)).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    v
}

// ---- model info ----

#[tokio::test]
async fn model_info_lists_targeted_dims() {
    let st = AppState::with_model(loaded(4));
    let (s, v) = call(&st, "GET", "/api/model", None).await;
    assert_eq!(s, StatusCode::OK);
    let info: ModelInfo = serde_json::from_value(v).unwrap();
    assert_eq!(info.targeted.iter().map(|t| t.dim).collect::<Vec<_>>(), vec![0, 1, 2, 3]);
    assert_eq!(info.targeted[2].property, "p2");
    assert_eq!(info.latent_dim, 6);
    assert_eq!(info.atoms, vec!["C", "N", "O", "F"]);
    assert_eq!(info.bonds, vec!["single", "double", "triple"]);
    assert_eq!((info.min_atoms, info.max_atoms), (1, 9));
}

#[tokio::test]
async fn coefficients_survive_json_bit_exactly() {
    let l = loaded(3);
    let heads = l.model.group_heads();
    let st = AppState::with_model(l);
    let (_, v) = call(&st, "GET", "/api/model", None).await;
    let info: ModelInfo = serde_json::from_value(v).unwrap();
    for t in &info.targeted {
        let want = &heads[t.dim].polynomials[0];
        let from_hex: Vec<f64> = t.coefficients_hex.iter().map(|h| hexfloat::parse(h).unwrap()).collect();
        assert_eq!(from_hex.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), want.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
        assert_eq!(t.coefficients.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), want.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
        assert_eq!(hexfloat::parse(&t.noise_sigma_hex).unwrap().to_bits(), heads[t.dim].noise_sigma[0].to_bits());
    }
}

/// Structural checks mirroring the schema published in the README.
fn check_model_schema(v: &Value) -> Result<(), String> {
    let obj = v.as_object().ok_or("not an object")?;
    let want = ["latent_dim", "targeted", "groups", "properties", "atoms", "bonds", "min_atoms", "max_atoms"];
    for k in want {
        if !obj.contains_key(k) {
            return Err(format!("missing {k}"));
        }
    }
    if obj.len() != want.len() {
        return Err("unexpected keys".into());
    }
    let latent = v["latent_dim"].as_u64().ok_or("latent_dim")?;
    for t in v["targeted"].as_array().ok_or("targeted")? {
        let dim = t["dim"].as_u64().ok_or("dim")?;
        if dim >= latent {
            return Err("dim out of range".into());
        }
        t["property"].as_str().ok_or("property")?;
        let c = t["coefficients"].as_array().ok_or("coefficients")?;
        let h = t["coefficients_hex"].as_array().ok_or("coefficients_hex")?;
        if c.len() != h.len() || c.is_empty() {
            return Err("coefficient arrays".into());
        }
        for (x, s) in c.iter().zip(h) {
            let parsed = hexfloat::parse(s.as_str().ok_or("hex string")?).map_err(|e| e.to_string())?;
            if parsed != x.as_f64().ok_or("number")? {
                return Err("hex and decimal disagree".into());
            }
        }
        if t["noise_sigma"].as_f64().ok_or("noise_sigma")? <= 0.0 {
            return Err("noise_sigma".into());
        }
        t["noise_sigma_hex"].as_str().ok_or("noise_sigma_hex")?;
    }
    for g in v["groups"].as_array().ok_or("groups")? {
        let dims = g["latent_dims"].as_array().ok_or("latent_dims")?;
        let props = g["properties"].as_array().ok_or("properties")?;
        if g["polynomials_hex"].as_array().ok_or("polynomials_hex")?.len() != dims.len() {
            return Err("polynomials".into());
        }
        let mix = g["mixing_hex"].as_array().ok_or("mixing_hex")?;
        if mix.len() != props.len() || mix.iter().any(|r| r.as_array().map(Vec::len) != Some(dims.len())) {
            return Err("mixing shape".into());
        }
    }
    for a in v["atoms"].as_array().ok_or("atoms")? {
        a.as_str().ok_or("atom symbol")?;
    }
    if v["min_atoms"].as_u64() > v["max_atoms"].as_u64() {
        return Err("size limits".into());
    }
    Ok(())
}

#[tokio::test]
async fn model_info_validates_for_random_checkpoints() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for case in 0..100 {
        let latent = rng.random_range(2..8);
        let j = rng.random_range(1..=latent.min(4));
        let groups = if j >= 2 && rng.random_bool(0.3) {
            // One grouped head over two dims and two properties, rest singletons.
            let mut g = vec![Group { latent_dims: vec![0, 1], properties: vec![0, 1] }];
            g.extend((2..j).map(|p| Group { latent_dims: vec![p], properties: vec![p] }));
            GroupSpec { groups: g }
        } else {
            GroupSpec::singletons(j)
        };
        let st = AppState::with_model(loaded_with(groups, latent, case));
        let (_, v) = call(&st, "GET", "/api/model", None).await;
        check_model_schema(&v).unwrap_or_else(|e| panic!("case {case}: {e}\n{v}"));
    }
}

// ---- seeding ----

#[tokio::test]
async fn fixed_seed_gives_identical_sessions() {
    let st = AppState::with_model(loaded(2));
    let a = seed(&st, json!({"seed": 11})).await;
    let b = seed(&st, json!({"seed": 11})).await;
    assert_ne!(a["session"], b["session"]);
    assert_eq!(a["zbar"], b["zbar"]);
    assert_eq!(a["n"], b["n"]);
    let one = seed(&st, json!({"n_atoms": 1, "seed": 2})).await;
    assert_eq!(one["n"], 1);
    let (s, v) = call(&st, "POST", "/api/decode", Some(json!({"session": one["session"]}))).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["graph"]["atoms"].as_array().unwrap().len(), 1);
}

#[tokio::test]
async fn seed_rejects_out_of_range_sizes() {
    let st = AppState::with_model(loaded(2));
    for n in [0, 10, 1000] {
        let (s, v) = call(&st, "POST", "/api/seed", Some(json!({"n_atoms": n}))).await;
        assert_eq!(s, StatusCode::BAD_REQUEST, "{n}");
        assert_eq!(v["code"], "bad_request");
    }
    let (s, _) = call(&st, "POST", "/api/seed", Some(json!({"atoms": 3}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn session_store_keeps_the_most_recent() {
    let st = AppState::with_model(loaded(1));
    let mut ids = Vec::new();
    for i in 0..2000u64 {
        ids.push(seed(&st, json!({"seed": i, "n_atoms": 2})).await["session"].as_str().unwrap().to_owned());
    }
    assert_eq!(st.session_count(), DEFAULT_SESSION_CAPACITY);
    for (i, id) in ids.iter().enumerate() {
        assert_eq!(st.session(id).is_ok(), i >= 2000 - DEFAULT_SESSION_CAPACITY, "session {i}");
    }
}

// ---- decoding ----

#[tokio::test]
async fn decode_is_deterministic_without_overrides() {
    let st = AppState::with_model(loaded(2));
    let s = seed(&st, json!({"seed": 5})).await;
    let body = json!({"session": s["session"]});
    let (_, a) = call(&st, "POST", "/api/decode", Some(body.clone())).await;
    let (_, b) = call(&st, "POST", "/api/decode", Some(body)).await;
    assert_eq!(a, b);
    assert_eq!(a["zbar"], s["zbar"]);
    assert!(a["valid"].as_bool().unwrap());
    for key in ["molecular_weight", "heavy_atom_count", "logp_atom_contrib"] {
        assert!(a["computed"][key].is_number(), "{key}");
    }
}

#[tokio::test]
async fn predicted_column_follows_the_head() {
    let l = loaded(3);
    let head = l.model.property_head(2).unwrap();
    let st = AppState::with_model(l);
    let s = seed(&st, json!({"seed": 8})).await;
    for value in linspace(-5.0, 5.0, 21) {
        let body = json!({"session": s["session"], "overrides": [{"dim": 2, "value": value}]});
        let (code, v) = call(&st, "POST", "/api/decode", Some(body)).await;
        assert_eq!(code, StatusCode::OK);
        let p = &v["predicted"][2];
        assert_eq!(p["property"], "p2");
        assert_eq!(p["value"].as_f64().unwrap().to_bits(), head.predict(value).to_bits());
        assert_eq!(p["denormalized"].as_f64().unwrap(), head.predict(value) * 2.0 + 2.0);
        assert_eq!(v["zbar"][2].as_f64().unwrap(), value);
    }
}

#[tokio::test]
async fn decode_error_codes() {
    let empty = AppState::new(4);
    let (s, v) = call(&empty, "GET", "/api/model", None).await;
    assert_eq!((s, v["code"].as_str()), (StatusCode::SERVICE_UNAVAILABLE, Some("no_model")));
    let (s, _) = call(&empty, "POST", "/api/seed", Some(json!({}))).await;
    assert_eq!(s, StatusCode::SERVICE_UNAVAILABLE);

    let st = AppState::with_model(loaded(2));
    let (s, v) = call(&st, "POST", "/api/decode", Some(json!({"session": "nope"}))).await;
    assert_eq!((s, v["code"].as_str()), (StatusCode::NOT_FOUND, Some("unknown_session")));
    let sess = seed(&st, json!({"seed": 1})).await["session"].clone();
    let (s, v) = call(&st, "POST", "/api/decode", Some(json!({"session": sess, "overrides": [{"dim": 4, "value": 1.0}]}))).await;
    assert_eq!((s, v["code"].as_str()), (StatusCode::BAD_REQUEST, Some("bad_request")));
    let (s, _) = call(&st, "POST", "/api/decode?temperature=-1", Some(json!({"session": sess}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, _) = call(&st, "POST", "/api/decode?temperature=abc", Some(json!({"session": sess}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, v) = call(&st, "POST", "/api/decode", Some(json!({"bogus": true}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert!(v["message"].is_string());
}

#[tokio::test]
async fn temperature_sampling_is_reproducible_per_session() {
    let st = AppState::with_model(loaded(2));
    let s = seed(&st, json!({"seed": 9})).await;
    let body = json!({"session": s["session"]});
    let (_, a) = call(&st, "POST", "/api/decode?temperature=1.0", Some(body.clone())).await;
    let (_, b) = call(&st, "POST", "/api/decode?temperature=1.0", Some(body)).await;
    assert_eq!(a, b);
}

#[test]
fn random_sessions_always_decode_to_valid_graphs() {
    let l = loaded(2);
    let reg = AtomRegistry::qm9();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for i in 0..1000u64 {
        let session = seed_session(&l, &SeedRequest::default(), i, format!("f{i}")).unwrap();
        let mut overrides = Vec::new();
        for dim in 0..2 {
            if rng.random_bool(0.5) {
                overrides.push(Override { dim, value: rng.random_range(-5.0..5.0) });
            }
        }
        let t = if rng.random_bool(0.5) { 0.0 } else { rng.random_range(0.1..2.0) };
        let r = decode_session(&l, &session, &overrides, t).unwrap();
        let text = serde_json::to_string(&r.graph).unwrap();
        let g = MolecularGraph::from_json(&serde_json::from_str(&text).unwrap(), &reg).unwrap();
        assert!(g.is_valid(&reg), "session {i}");
        assert_eq!(r.computed["heavy_atom_count"], BuiltinProperty::HeavyAtomCount.compute(&g, &reg));
    }
}

// ---- traversal ----

#[tokio::test]
async fn traversal_over_http() {
    let st = AppState::with_model(loaded(2));
    let s = seed(&st, json!({"seed": 4})).await;
    let req = json!({"session": s["session"], "dim": 1, "lo": -2.0, "hi": 3.0, "steps": 7});
    let (code, v) = call(&st, "POST", "/api/traverse", Some(req)).await;
    assert_eq!(code, StatusCode::OK);
    let arr = v.as_array().unwrap();
    assert_eq!(arr.len(), 7);
    for (p, want) in arr.iter().zip(linspace(-2.0, 3.0, 7)) {
        assert_eq!(p["zbar"][1].as_f64().unwrap().to_bits(), want.to_bits());
    }

    let one = json!({"session": s["session"], "dim": 1, "lo": 0.5, "hi": 0.5, "steps": 1});
    let (_, v) = call(&st, "POST", "/api/traverse", Some(one)).await;
    let single = json!({"session": s["session"], "overrides": [{"dim": 1, "value": 0.5}]});
    let (_, d) = call(&st, "POST", "/api/decode", Some(single)).await;
    assert_eq!(v, json!([d]));

    for bad in [
        json!({"session": s["session"], "dim": 1, "lo": 1.0, "hi": 1.0, "steps": 3}),
        json!({"session": s["session"], "dim": 1, "lo": 0.0, "hi": 1.0, "steps": 0}),
        json!({"session": s["session"], "dim": 5, "lo": 0.0, "hi": 1.0, "steps": 3}),
    ] {
        let (code, _) = call(&st, "POST", "/api/traverse", Some(bad)).await;
        assert_eq!(code, StatusCode::BAD_REQUEST);
    }
}

#[tokio::test]
async fn concurrent_requests_agree() {
    let st = AppState::with_model(loaded(2));
    let s = seed(&st, json!({"seed": 21})).await;
    let body = json!({"session": s["session"], "overrides": [{"dim": 0, "value": 1.5}]});
    let tasks: Vec<_> = (0..16)
        .map(|_| {
            let st = st.clone();
            let body = body.clone();
            tokio::spawn(async move { call(&st, "POST", "/api/decode", Some(body)).await.1 })
        })
        .collect();
    let mut results = Vec::new();
    for t in tasks {
        results.push(t.await.unwrap());
    }
    assert!(results.windows(2).all(|w| w[0] == w[1]));
}

#[tokio::test]
async fn reload_swaps_the_model_and_drops_sessions() {
    let st = AppState::with_model(loaded(2));
    let s = seed(&st, json!({"seed": 1})).await;
    st.load(loaded(3));
    let (code, _) = call(&st, "POST", "/api/decode", Some(json!({"session": s["session"]}))).await;
    assert_eq!(code, StatusCode::NOT_FOUND);
    let (_, v) = call(&st, "GET", "/api/model", None).await;
    assert_eq!(v["targeted"].as_array().unwrap().len(), 3);
}

#[tokio::test]
async fn cors_headers_are_sent() {
    let st = AppState::with_model(loaded(1));
    let req = Request::builder()
        .method("OPTIONS")
        .uri("/api/decode")
        .header("origin", "http://localhost:8000")
        .header("access-control-request-method", "POST")
        .body(Body::empty())
        .unwrap();
    let resp = router(st, None).oneshot(req).await.unwrap();
    assert_eq!(resp.headers()["access-control-allow-origin"], "*");
}

#[test]
fn checkpoint_loads_into_the_service() {
    let l = loaded(2);
    let ck = Checkpoint::from_model(&l.model, l.specs.clone(), &TrainConfig::qm9(), 0, 0, l.size_histogram.clone());
    let back = Loaded::from_checkpoint(&ck).unwrap();
    assert_eq!(model_info(&back), model_info(&l));
}

proptest! {
    #[test]
    fn hexfloat_round_trips_every_finite_value(bits in any::<u64>()) {
        let v = f64::from_bits(bits);
        prop_assume!(v.is_finite());
        prop_assert_eq!(hexfloat::parse(&hexfloat::format(v)).unwrap().to_bits(), bits);
    }
}
