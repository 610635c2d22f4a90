use pathlm::corpus::{make_split, preprocess, CorpusSplit, DIAGNOSIS};
use pathlm::encoder::checkpoint;
use pathlm::encoder::EncoderConfig;
use pathlm::evaluation::LabelCounts;
use pathlm::synthcorpus::{generate, TemplateSpec};
use pathlm::training::{finetune, predict_labels, pretrain, FinetuneConfig, PretrainConfig};
use pathlm::wordpiece::{train_vocab, TrainerConfig, Vocabulary};
use pathlm::Error;

fn setup(n_reports: usize) -> (CorpusSplit, Vocabulary) {
    let mut spec = TemplateSpec::bundled();
    spec.n_reports = n_reports;
    let elements = preprocess(&generate(&spec).unwrap(), DIAGNOSIS);
    let split = make_split(&elements, (0.7, 0.15, 0.15), 1).unwrap();
    let vocab = train_vocab(
        split.train.iter().map(|e| e.text.as_str()),
        &TrainerConfig {
            vocab_size: 600,
            min_frequency: 2,
        },
    )
    .unwrap();
    (split, vocab)
}

fn small(vocab: &Vocabulary) -> EncoderConfig {
    EncoderConfig {
        hidden_dim: 32,
        ff_dim: 64,
        max_seq_len: 48,
        ..EncoderConfig::desk(vocab.len())
    }
}

#[test]
fn pretraining_learns_logs_and_checkpoints() {
    let (split, vocab) = setup(300);
    let dir = tempfile::tempdir().unwrap();
    let cfg = PretrainConfig {
        lr: 2e-3,
        total_steps: 60,
        batch_size: 16,
        eval_every: 20,
        checkpoint_every: 25,
        ..Default::default()
    };
    let out = pretrain(&split, &vocab, small(&vocab), &cfg, Some(dir.path())).unwrap();
    assert_eq!(out.log.len(), 60);
    assert!(out.log.iter().enumerate().all(|(i, r)| r.step == i + 1));
    let evals: Vec<usize> = out
        .log
        .iter()
        .filter(|r| r.val_metric.is_some())
        .map(|r| r.step)
        .collect();
    assert_eq!(evals, [20, 40, 60]);
    let head: f64 = out.log[..10].iter().map(|r| r.train_loss).sum::<f64>() / 10.0;
    let tail: f64 = out.log[50..].iter().map(|r| r.train_loss).sum::<f64>() / 10.0;
    assert!(tail < head, "loss {head} -> {tail}");
    let names: Vec<String> = out
        .checkpoints
        .iter()
        .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
        .collect();
    assert_eq!(names, ["step-00000025.plmc", "step-00000050.plmc"]);
    let ck = checkpoint::load(&out.checkpoints[1], Some(&vocab)).unwrap();
    assert_eq!(ck.header.step, 50);

    let again = pretrain(
        &split,
        &vocab,
        small(&vocab),
        &PretrainConfig {
            checkpoint_every: 0,
            ..cfg
        },
        None,
    )
    .unwrap();
    assert_eq!(again.weights, out.weights);
}

#[test]
fn divergence_is_reported_with_the_last_checkpoint() {
    let (split, vocab) = setup(120);
    let dir = tempfile::tempdir().unwrap();
    let cfg = PretrainConfig {
        lr: 1e30,
        total_steps: 50,
        batch_size: 8,
        eval_every: 0,
        checkpoint_every: 1,
        ..Default::default()
    };
    match pretrain(&split, &vocab, small(&vocab), &cfg, Some(dir.path())) {
        Err(e @ Error::Diverged { .. }) => {
            let Error::Diverged { step, ref checkpoint } = e else {
                unreachable!()
            };
            assert!((1..=50).contains(&step));
            assert!(checkpoint == "none" || checkpoint.ends_with(".plmc"), "{checkpoint}");
            assert!(!e.is_input_error());
        }
        other => panic!("expected divergence, got {:?}", other.map(|o| o.log.len())),
    }
}

fn dev_f1(
    out: &pathlm::training::FinetuneOutcome,
    cfg: &FinetuneConfig,
    split: &CorpusSplit,
    vocab: &Vocabulary,
) -> f64 {
    let texts: Vec<&str> = split.validation.iter().map(|e| e.text.as_str()).collect();
    let preds = predict_labels(&out.weights, &cfg.labels, &texts, vocab, cfg.decision_threshold).unwrap();
    let mut counts = LabelCounts::new(cfg.labels.len());
    for (p, e) in preds.iter().zip(&split.validation) {
        let truth = e.labels.clone().unwrap_or_default();
        let p: Vec<bool> = cfg.labels.iter().map(|l| p.labels.contains(l)).collect();
        let t: Vec<bool> = cfg.labels.iter().map(|l| truth.contains(l)).collect();
        counts.add(&p, &t);
    }
    counts.micro().2
}

#[test]
fn early_stopping_returns_the_best_epoch() {
    let (split, vocab) = setup(300);
    let pre = pretrain(
        &split,
        &vocab,
        small(&vocab),
        &PretrainConfig {
            lr: 2e-3,
            total_steps: 30,
            batch_size: 16,
            eval_every: 0,
            ..Default::default()
        },
        None,
    )
    .unwrap();
    let mut stopped = 0;
    for (lr, patience) in [(3e-3, 1), (5e-2, 2)] {
        let cfg = FinetuneConfig {
            epochs: 8,
            batch_size: 16,
            lr,
            patience,
            ..Default::default()
        };
        let out = finetune(&pre.weights, &split.train, Some(&split.validation), &vocab, &cfg).unwrap();
        let f1s: Vec<f64> = out.epochs.iter().map(|e| e.dev_micro_f1).collect();
        let best = f1s.iter().cloned().fold(f64::MIN, f64::max);
        assert_eq!(
            out.best_epoch,
            f1s.iter().position(|&f| f == best).unwrap() + 1,
            "{f1s:?}"
        );
        assert_eq!(dev_f1(&out, &cfg, &split, &vocab), best);
        if out.stopped_early {
            stopped += 1;
            assert_eq!(out.epochs.len(), out.best_epoch + patience, "{f1s:?}");
        } else {
            assert_eq!(out.epochs.len(), 8);
        }
        assert_eq!(out.weights.config.dropout_rate, pre.weights.config.dropout_rate);
        assert_eq!(out.weights.config.n_labels, 6);
    }
    assert!(stopped > 0, "no run exercised early stopping");
}

#[test]
fn predictions_do_not_depend_on_batch_composition() {
    let (split, vocab) = setup(150);
    let w = pathlm::encoder::ModelWeights::<f32>::init(small(&vocab), 3)
        .unwrap()
        .with_cls_head(6, 4);
    let labels = pathlm::training::default_labels();
    let texts: Vec<&str> = split.train.iter().take(70).map(|e| e.text.as_str()).collect();
    let all = predict_labels(&w, &labels, &texts, &vocab, 0.5).unwrap();
    for (i, t) in texts.iter().enumerate().step_by(7) {
        let one = predict_labels(&w, &labels, &[t], &vocab, 0.5).unwrap();
        for (a, b) in one[0].probabilities.iter().zip(&all[i].probabilities) {
            assert!((a - b).abs() < 1e-6, "text {i}: {a} vs {b}");
        }
    }
    assert!(predict_labels(&w, &labels[..5], &texts, &vocab, 0.5).is_err());
}
