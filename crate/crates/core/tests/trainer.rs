use attnxl::data::{TaskConfig, TaskData};
use attnxl::networks::ModelConfig;
use attnxl::trainer::{checkpoint, train_loop, Ablation, Critic, RunPaths, TrainConfig, Trainer};
use attnxl::Error;

fn tiny_task() -> TaskData {
    let mut t = TaskConfig::shapes8();
    t.n_train = 48;
    t.n_test = 8;
    t.build().unwrap()
}

fn tiny_cfg(data: &TaskData, steps: u64, seed: u64) -> TrainConfig {
    let mut c = TrainConfig::for_image(&data.source.image, steps, seed);
    c.batch_size = 8;
    c.model = ModelConfig {
        encoder_channels: vec![2, 4],
        res_blocks: 1,
        generator_channels: vec![4, 2],
        discriminator_channels: vec![2, 4],
        ..ModelConfig::default()
    };
    c
}

fn bytes_of(tr: &Trainer) -> Vec<u8> {
    let mut buf = Vec::new();
    attnxl::records::write_records(&mut buf, &checkpoint::to_records(tr).unwrap()).unwrap();
    buf
}

#[test]
fn same_seed_same_checkpoint() {
    let data = tiny_task();
    let (a, _) = train_loop(&data, tiny_cfg(&data, 12, 3), &RunPaths::default()).unwrap();
    let (b, _) = train_loop(&data, tiny_cfg(&data, 12, 3), &RunPaths::default()).unwrap();
    assert_eq!(bytes_of(&a), bytes_of(&b));
    let (c, _) = train_loop(&data, tiny_cfg(&data, 12, 4), &RunPaths::default()).unwrap();
    assert_ne!(bytes_of(&a), bytes_of(&c));
}

#[test]
fn resume_matches_uninterrupted_run() {
    let data = tiny_task();
    let dir = tempfile::tempdir().unwrap();
    let paths = RunPaths {
        dir: Some(dir.path().to_path_buf()),
    };
    let (half, _) = train_loop(&data, tiny_cfg(&data, 5, 9), &paths).unwrap();
    let mut resumed = checkpoint::load(&paths.last().unwrap(), Some(&half.cfg)).unwrap();
    assert_eq!(bytes_of(&resumed), bytes_of(&half));
    resumed.cfg.steps = 10;
    attnxl::trainer::run_steps(&mut resumed, &data, &paths).unwrap();
    let (straight, _) = train_loop(&data, tiny_cfg(&data, 10, 9), &RunPaths::default()).unwrap();
    resumed.cfg.steps = straight.cfg.steps;
    assert_eq!(bytes_of(&resumed), bytes_of(&straight));
    let lines = std::fs::read_to_string(paths.metrics().unwrap()).unwrap();
    assert_eq!(lines.lines().count(), 10);
}

#[test]
fn zero_steps_writes_init_checkpoint() {
    let data = tiny_task();
    let dir = tempfile::tempdir().unwrap();
    let paths = RunPaths {
        dir: Some(dir.path().to_path_buf()),
    };
    let (tr, hist) = train_loop(&data, tiny_cfg(&data, 0, 1), &paths).unwrap();
    assert!(hist.is_empty());
    let fresh = Trainer::for_task(tiny_cfg(&data, 0, 1), &data).unwrap();
    assert_eq!(bytes_of(&tr), bytes_of(&fresh));
    assert_eq!(
        std::fs::read(paths.last().unwrap()).unwrap(),
        bytes_of(&fresh)
    );
    assert_eq!(
        std::fs::read_to_string(paths.metrics().unwrap()).unwrap(),
        ""
    );
}

#[test]
fn metrics_log_has_one_line_per_step() {
    let data = tiny_task();
    let dir = tempfile::tempdir().unwrap();
    let paths = RunPaths {
        dir: Some(dir.path().to_path_buf()),
    };
    let mut cfg = tiny_cfg(&data, 4, 2);
    cfg.checkpoint_every = 2;
    train_loop(&data, cfg, &paths).unwrap();
    let text = std::fs::read_to_string(paths.metrics().unwrap()).unwrap();
    let lines: Vec<serde_json::Value> = text
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 4);
    for (i, l) in lines.iter().enumerate() {
        let obj = l.as_object().unwrap();
        let mut keys: Vec<&str> = obj.keys().map(String::as_str).collect();
        keys.sort_unstable();
        assert_eq!(
            keys,
            ["adv_s", "adv_t", "cst", "geo", "step", "sym", "total"]
        );
        assert_eq!(obj["step"].as_u64(), Some(i as u64 + 1));
    }
    assert!(paths.checkpoint(2).unwrap().exists());
    assert!(paths.checkpoint(4).unwrap().exists());
}

#[test]
fn critic_step_touches_only_its_critic() {
    let data = tiny_task();
    let mut tr = Trainer::for_task(tiny_cfg(&data, 1, 5), &data).unwrap();
    let before = tr.models.clone();
    let real = attnxl::networks::oracle::gather(&data.target.images, &[0, 1, 2, 3]).unwrap();
    let fake = attnxl::networks::oracle::gather(&data.source.images, &[0, 1, 2, 3]).unwrap();
    tr.critic_step(Critic::D1, &real, &fake).unwrap();
    assert_eq!(tr.models.dae, before.dae);
    assert_eq!(tr.models.gen, before.gen);
    assert_eq!(tr.models.d2, before.d2);
    assert_ne!(tr.models.d1, before.d1);
}

#[test]
fn ablation_switches() {
    let data = tiny_task();
    let mut cfg = tiny_cfg(&data, 3, 6);
    cfg.ablation = Ablation::NoCst;
    let (_, hist) = train_loop(&data, cfg.clone(), &RunPaths::default()).unwrap();
    let w = cfg.effective_weights();
    assert_eq!(w.alpha, 0.0);
    for b in &hist {
        let expect = b.adv_s + b.adv_t + w.beta * b.sym + w.gamma * b.geo;
        assert!(
            (b.total - expect).abs() <= 1e-5 * expect.abs().max(1.0),
            "{b:?}"
        );
        assert!(b.cst > 0.0);
    }

    let mut cfg = tiny_cfg(&data, 3, 6);
    cfg.ablation = Ablation::NoD2;
    let init = Trainer::for_task(cfg.clone(), &data).unwrap();
    let (tr, hist) = train_loop(&data, cfg, &RunPaths::default()).unwrap();
    assert_eq!(tr.models.d2, init.models.d2);
    assert_ne!(tr.models.d1, init.models.d1);
    assert!(hist.iter().all(|b| b.adv_t == 0.0));

    let mut cfg = tiny_cfg(&data, 2, 6);
    cfg.ablation = Ablation::NoDae;
    let (tr, _) = train_loop(&data, cfg, &RunPaths::default()).unwrap();
    assert_eq!(tr.models.dae.n_regions(), 1);
}

#[test]
fn checkpoint_rejects_mismatched_config_and_bad_files() {
    let data = tiny_task();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.dagn");
    let tr = Trainer::for_task(tiny_cfg(&data, 1, 1), &data).unwrap();
    checkpoint::save(&path, &tr).unwrap();

    let mut other = tiny_cfg(&data, 1, 1);
    other.attention.n_regions = 2;
    match checkpoint::load(&path, Some(&other)) {
        Err(Error::ConfigMismatch(msg)) => assert!(msg.contains("n_regions"), "{msg}"),
        r => panic!("expected config mismatch, got {:?}", r.map(|_| ())),
    }
    // a different seed is not a structural change
    let mut reseeded = tiny_cfg(&data, 1, 1);
    reseeded.seed = 77;
    checkpoint::load(&path, Some(&reseeded)).unwrap();

    let mut raw = std::fs::read(&path).unwrap();
    raw[1] = b'X';
    std::fs::write(&path, &raw).unwrap();
    let err = checkpoint::load(&path, None).unwrap_err();
    assert!(err.to_string().contains("bad magic"), "{err}");
}

#[test]
fn content_terms_reach_the_encoder_only_when_enabled() {
    let data = tiny_task();
    let s =
        attnxl::networks::oracle::gather(&data.source.images, &[0, 1, 2, 3, 4, 5, 6, 7]).unwrap();
    let t =
        attnxl::networks::oracle::gather(&data.target.images, &[0, 1, 2, 3, 4, 5, 6, 7]).unwrap();
    let labels = &data.source.labels[..8];
    let step = |on: bool| {
        let mut cfg = tiny_cfg(&data, 1, 8);
        cfg.content_grads_to_encoder = on;
        let mut tr = Trainer::for_task(cfg, &data).unwrap();
        tr.train_step(&s, labels, &t).unwrap();
        tr
    };
    let (frozen, live) = (step(false), step(true));
    // G sees the same gradient either way; only the encoder's differs
    assert_eq!(frozen.models.gen, live.models.gen);
    assert_eq!(frozen.models.d1, live.models.d1);
    assert_ne!(frozen.models.dae, live.models.dae);
}
