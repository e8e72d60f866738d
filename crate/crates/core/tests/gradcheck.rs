use m2unet::gradcheck::{self, CHECKS};

#[test]
fn every_op_and_block_matches_finite_differences() {
    for name in CHECKS.iter().filter(|c| !c.starts_with("model")) {
        for seed in 0..5 {
            let r = gradcheck::run(name, seed).unwrap();
            println!("{name} seed {seed}: max rel err {:.3e} over {} probes", r.max_rel_err, r.probes);
            assert!(r.passed(), "{name} seed {seed}: {r:?}");
        }
    }
}

#[test]
fn unknown_check_is_a_usage_error() {
    assert!(matches!(gradcheck::run("engine/nope", 0), Err(m2unet::Error::Usage(_))));
}

#[test]
fn select_filters_by_module() {
    let picked = gradcheck::select(Some("blocks"));
    assert!(!picked.is_empty());
    assert!(picked.iter().all(|c| c.starts_with("blocks/")));
    assert_eq!(gradcheck::select(None).len(), CHECKS.len());
}

#[test]
fn full_models_match_finite_differences() {
    for name in ["model/full", "model/tiny"] {
        let t = std::time::Instant::now();
        let r = gradcheck::run(name, 0).unwrap();
        println!("{name} seed 0: {:.3e} over {} probes in {:?}", r.max_rel_err, r.probes, t.elapsed());
        assert_eq!(r.name, name);
        assert!(r.passed(), "{r:?}");
    }
}
