use mdvae::chem::AtomRegistry;
use mdvae::dataset::PropertySpec;
use mdvae::heads::GroupSpec;
use mdvae::model::{Model, ModelConfig};
use mdvae::training::{Checkpoint, TrainConfig};
use mdvae_web::{Demo, DemoError, Override};

fn checkpoint() -> Checkpoint {
    let cfg = ModelConfig { hidden: 10, latent: 5, steps: 2, degree: 3 };
    let model = Model::new(cfg, AtomRegistry::qm9(), GroupSpec::singletons(2), 4).unwrap();
    let mut specs = vec![PropertySpec::column("a"), PropertySpec::column("b")];
    specs[1].mean = 10.0;
    specs[1].std = 3.0;
    Checkpoint::from_model(&model, specs, &TrainConfig::qm9(), 0, 0, vec![0, 1, 3, 5, 2, 1])
}

fn service(ck: &Checkpoint) -> mdvae_service::Loaded {
    mdvae_service::Loaded::from_checkpoint(ck).unwrap()
}

#[test]
fn decodes_match_the_http_service() {
    let ck = checkpoint();
    let svc = service(&ck);
    let mut demo = Demo::from_bytes(&ck.to_bytes().unwrap()).unwrap();
    for seed in 0..40u64 {
        let zbar = demo.seed(seed, None).unwrap();
        let session =
            mdvae_service::seed_session(&svc, &mdvae_service::SeedRequest::default(), seed, "x".into()).unwrap();
        assert_eq!(zbar, session.zbar());
        let value = seed as f64 / 4.0 - 5.0;
        let here = demo.decode(&[Override { dim: 1, value }]).unwrap();
        let there = mdvae_service::decode_session(&svc, &session, &[mdvae_service::Override { dim: 1, value }], 0.0).unwrap();
        assert_eq!(here.smiles, there.smiles);
        assert_eq!(here.canonical_key, there.canonical_key);
        assert_eq!(here.graph, there.graph);
        assert_eq!(here.computed, there.computed);
        assert_eq!(here.zbar, there.zbar);
        let denorm: Vec<f64> = there.predicted.iter().map(|p| p.denormalized).collect();
        assert_eq!(here.predicted, denorm);
        assert!(here.valid);
    }
}

#[test]
fn curves_match_model_info() {
    let ck = checkpoint();
    let info = Demo::from_checkpoint(&ck).unwrap().info();
    let svc = mdvae_service::model_info(&service(&ck));
    assert_eq!(info.latent_dim, 5);
    assert_eq!(info.properties, ["a", "b"]);
    assert_eq!(info.max_atoms, svc.max_atoms);
    assert_eq!(info.curves.len(), svc.targeted.len());
    for (c, t) in info.curves.iter().zip(&svc.targeted) {
        assert_eq!((c.dim, &c.property, &c.coefficients), (t.dim, &t.property, &t.coefficients));
    }
    assert_eq!((info.curves[1].mean, info.curves[1].std), (10.0, 3.0));
}

#[test]
fn sweep_hits_every_grid_value() {
    let mut demo = Demo::from_checkpoint(&checkpoint()).unwrap();
    demo.seed(3, Some(4)).unwrap();
    let views = demo.sweep(0, -1.0, 1.0, 5).unwrap();
    let got: Vec<f64> = views.iter().map(|v| v.zbar[0]).collect();
    assert_eq!(got, [-1.0, -0.5, 0.0, 0.5, 1.0]);
    let single = demo.decode(&[Override { dim: 0, value: 0.5 }]).unwrap();
    assert_eq!(views[3], single);
}

#[test]
fn rejects_bad_requests() {
    let mut demo = Demo::from_checkpoint(&checkpoint()).unwrap();
    assert!(matches!(demo.decode(&[]), Err(DemoError::NotSeeded)));
    assert!(matches!(demo.seed(0, Some(0)), Err(DemoError::Bad(_))));
    assert!(matches!(demo.seed(0, Some(6)), Err(DemoError::Bad(_))));
    demo.seed(0, Some(5)).unwrap();
    assert!(matches!(demo.decode(&[Override { dim: 2, value: 0.0 }]), Err(DemoError::Bad(_))));
    assert!(matches!(demo.decode(&[Override { dim: 0, value: f64::NAN }]), Err(DemoError::Bad(_))));
    assert!(matches!(demo.sweep(0, 1.0, 1.0, 3), Err(DemoError::Bad(_))));
    assert!(matches!(demo.sweep(0, 0.0, 1.0, 1), Err(DemoError::Bad(_))));
    assert!(matches!(Demo::from_bytes(b"not a checkpoint"), Err(DemoError::Checkpoint(_))));
}
