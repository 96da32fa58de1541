//! Scratch harness for tuning the end-to-end ablation recipe. Not shipped.

use std::time::Instant;

use clp::config::{Config, SynthConfig, WeightSchedule};
use clp::data::labels::{join_with_manifests, label_names};
use clp::data::{FrameStore, Sampler};
use clp::encoder::Encoder;
use clp::probe::{build_probe_data, mean_pair_cosine, run_probe, ProbeData};
use clp::synth::{build_corpus, cross_identity_pairs, GeneratedCorpus};
use clp::trainer::{train_loop, TrainState};
use ndarray::Array2;

fn envf(name: &str, default: f64) -> f64 {
    std::env::var(name).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}
fn envu(name: &str, default: usize) -> usize {
    std::env::var(name).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn base_config(seed: u64) -> Config {
    let mut cfg = Config::default();
    cfg.seed = seed;
    cfg.data.input_size = 16;
    cfg.encoder.hidden = vec![envu("HID1", 96), envu("HID2", 64)];
    cfg.encoder.feature_dim = envu("FEAT", 64);
    cfg.encoder.head_hidden = envu("HEAD", 64);
    cfg.encoder.embed_dim = envu("EMBED", 64);
    cfg.tcl.seq_len = 9;
    cfg.tcl.stride = 2;
    cfg.cir.memory_size = envu("MEM", 512);
    cfg.cir.min_negatives = 64;
    cfg.cir.momentum = envf("RHO", 0.9);
    cfg.cir.exclude_same_video = envu("EXCL", 1) == 1;
    cfg.cir.frames_per_video = envu("L", 2);
    cfg.cir.temperature = envf("TAU", 0.07);
    cfg.train.epochs = envu("EPOCHS", 40);
    cfg.train.batch_videos = 8;
    cfg.train.lr = envf("LR", 0.05);
    cfg.train.momentum = envf("SGD_MOM", 0.9);
    cfg.train.log_every = 1000;
    cfg.probe.epochs = envu("PROBE_EPOCHS", 10);
    cfg.probe.lr = envf("PROBE_LR", 0.01);
    cfg.probe.update_backbone_bn = envu("PROBE_BN", 1) == 1;
    cfg
}

fn synth_cfg() -> SynthConfig {
    SynthConfig {
        subjects: envu("SUBJECTS", 24),
        videos_per_subject: envu("VIDEOS", 1),
        frames_per_video: envu("FRAMES", 60),
        image_size: 16,
        latent_dims: envu("LATENTS", 3),
        event_prob: envf("EVENT", 0.03),
        reversion: envf("REVERT", 0.12),
        drive: envf("DRIVE", 0.08),
        identity_strength: envf("IDS", 0.35),
        activation_strength: envf("ACTS", 0.30),
        pixel_noise: envf("NOISE", 0.02),
        ..SynthConfig::default()
    }
}

struct World {
    corpus: GeneratedCorpus,
    store: FrameStore,
    probe_data: ProbeData,
    pairs: Vec<(usize, usize)>,
}

fn build_world(seed: u64) -> World {
    let (corpus, videos) = build_corpus(&synth_cfg(), seed).unwrap();
    let store = FrameStore::from_images(videos);
    let names = label_names(&corpus.labels);
    let examples = join_with_manifests(&corpus.labels, &corpus.manifests).unwrap();
    let probe_data = build_probe_data(&store, &corpus.manifests, &examples, &names, 16).unwrap();
    let pairs = cross_identity_pairs(&corpus.states, envf("PAIR_EPS", 0.1), 200);
    World { corpus, store, probe_data, pairs }
}

/// Recompute the reconstruction loss with every embedding drawn from the
/// final encoders at once, so queue entries carry no training-age signature.
/// A training loss far below this number means the run was reading entry age,
/// not frame content.
fn fresh_cir_loss(online: &Encoder, target: &Encoder, world: &World, cfg: &Config, seed: u64) -> f64 {
    use rand::Rng;
    let px = &world.probe_data.pixels;
    let n = px.nrows();
    let q_emb = {
        let mut e = online.clone();
        e.embed_cir_eval(px)
    };
    let k_emb = {
        let mut e = target.clone();
        e.embed_cir_eval(px)
    };
    let mut r = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed ^ 0xf7e5);
    let vids = &world.probe_data.subjects;
    let mut loss = 0.0;
    let queries = 64;
    for _ in 0..queries {
        let b = r.gen_range(0..n);
        let other: Vec<usize> = (0..n).filter(|&i| vids[i] != vids[b]).collect();
        let pick = |r: &mut rand_chacha::ChaCha8Rng, m: usize| -> Array2<f64> {
            let mut out = Array2::zeros((m, k_emb.ncols()));
            for row in 0..m {
                let i = other[r.gen_range(0..other.len())];
                out.row_mut(row).assign(&k_emb.row(i));
            }
            out
        };
        let dict = pick(&mut r, 128);
        let negs = pick(&mut r, 128);
        loss += clp::cir::cir_loss(
            q_emb.row(b).as_slice().unwrap(),
            k_emb.row(b).as_slice().unwrap(),
            &dict,
            &negs,
            cfg.cir.temperature,
            false,
        ) / queries as f64;
    }
    loss
}

fn pretrain_cell(world: &World, cfg: &Config) -> (Encoder, Encoder, f64, f64) {
    let sampler =
        Sampler::new(&world.corpus.manifests, &cfg.tcl, &cfg.cir, cfg.train.batch_videos).unwrap();
    let mut state = TrainState::new(cfg, cfg.seed).unwrap();
    let trace = envu("TRACE", 0);
    let mut last = (0.0, 0.0);
    train_loop(
        &mut state,
        cfg,
        &sampler,
        &world.store,
        |_, m| {
            last = (m.l_tcl, m.l_cir);
            if trace > 0 && m.step % trace == 0 {
                eprintln!(
                    "    step {:4} l_tcl {:.4} l_cir {:.4} fill {}",
                    m.step, m.l_tcl, m.l_cir, m.queue_fill
                );
            }
            Ok(())
        },
        |_| Ok(()),
    )
    .unwrap();
    (state.online, state.target, last.0, last.1)
}

/// Mean pair cosine in the temporal-head embedding space.
fn pull_tcl_space(enc: &Encoder, pixels: &Array2<f64>, pairs: &[(usize, usize)]) -> f64 {
    let mut enc = enc.clone();
    let emb = enc.embed_tcl_eval(pixels);
    let mut s = 0.0;
    for &(a, b) in pairs {
        s += clp::cir::cosine(
            emb.row(a).as_slice().unwrap(),
            emb.row(b).as_slice().unwrap(),
        );
    }
    s / pairs.len() as f64
}

/// Mean pair cosine in the reconstruction-head embedding space.
fn pull_cir_space(enc: &Encoder, pixels: &Array2<f64>, pairs: &[(usize, usize)]) -> f64 {
    let mut enc = enc.clone();
    let emb = enc.embed_cir_eval(pixels);
    let mut s = 0.0;
    for &(a, b) in pairs {
        s += clp::cir::cosine(
            emb.row(a).as_slice().unwrap(),
            emb.row(b).as_slice().unwrap(),
        );
    }
    s / pairs.len() as f64
}

fn mean_cos(emb: &Array2<f64>, pairs: &[(usize, usize)]) -> f64 {
    let mut s = 0.0;
    for &(a, b) in pairs {
        s += clp::cir::cosine(emb.row(a).as_slice().unwrap(), emb.row(b).as_slice().unwrap());
    }
    s / pairs.len() as f64
}

/// Participation ratio of the feature covariance spectrum: (Σλ)² / Σλ².
fn effective_rank(emb: &Array2<f64>) -> f64 {
    let n = emb.nrows() as f64;
    let mean = emb.mean_axis(ndarray::Axis(0)).unwrap();
    let centered = emb - &mean;
    let cov = centered.t().dot(&centered) / n;
    // Power-free proxy: tr(C)^2 / tr(C^2), exact for the PR definition.
    let tr = cov.diag().sum();
    let tr2 = (&cov * &cov.t()).sum();
    if tr2 <= 0.0 { 0.0 } else { tr * tr / tr2 }
}

/// Same-state pull vs a scrambled-pair baseline, plus feature rank, per cell.
fn cell_diagnostics(enc: &Encoder, world: &World, seed: u64) -> String {
    let px = &world.probe_data.pixels;
    let mut e = enc.clone();
    let feats = e.features_eval(px);
    let cir = e.embed_cir_eval(px);
    let mut r = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed ^ 0xd1a6);
    let n = px.nrows();
    let rand_pairs: Vec<(usize, usize)> = (0..world.pairs.len())
        .map(|_| {
            (
                rand::Rng::gen_range(&mut r, 0..n),
                rand::Rng::gen_range(&mut r, 0..n),
            )
        })
        .collect();
    format!(
        "feat pair/base {:+.3}/{:+.3} rank {:4.1} | cir pair/base {:+.3}/{:+.3} rank {:4.1}",
        mean_cos(&feats, &world.pairs),
        mean_cos(&feats, &rand_pairs),
        effective_rank(&feats),
        mean_cos(&cir, &world.pairs),
        mean_cos(&cir, &rand_pairs),
        effective_rank(&cir),
    )
}

fn main() {
    let seeds: Vec<u64> = std::env::args()
        .nth(1)
        .map(|s| s.split(',').map(|x| x.parse().unwrap()).collect())
        .unwrap_or_else(|| vec![1, 2, 3]);

    let mut table: Vec<(String, Vec<f64>)> = Vec::new();
    let mut gaps_feat = Vec::new();
    let mut gaps_emb = Vec::new();
    let mut gaps_cir = Vec::new();
    for &seed in &seeds {
        let t0 = Instant::now();
        let world = build_world(seed);
        eprintln!(
            "seed {seed}: {} videos, {} pairs, built in {:?}",
            world.corpus.manifests.len(),
            world.pairs.len(),
            t0.elapsed()
        );

        let base = base_config(seed);
        let mut full = base.clone();
        full.train.beta = envf("BETA", 0.1);
        let mut cir_only = base.clone();
        cir_only.tcl.enabled = false;
        cir_only.train.beta = envf("CIR_BETA", envf("BETA", 0.1));
        let mut tcl_sqrt = base.clone();
        tcl_sqrt.cir.enabled = false;
        let mut tcl_uni = base.clone();
        tcl_uni.cir.enabled = false;
        tcl_uni.tcl.weight_schedule = WeightSchedule::Uniform;
        let cells: Vec<(&str, Option<Config>)> = vec![
            ("full", Some(full)),
            ("cir_only", Some(cir_only)),
            ("tcl_sqrt", Some(tcl_sqrt)),
            ("tcl_uniform", Some(tcl_uni)),
            ("random", None),
        ];

        let mut full_enc: Option<Encoder> = None;
        let mut tcl_enc: Option<Encoder> = None;
        for (name, cell_cfg) in &cells {
            let t = Instant::now();
            let (enc, target, ltcl, lcir) = match cell_cfg {
                Some(c) => pretrain_cell(&world, c),
                None => {
                    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(
                        seed ^ 0x5eed,
                    );
                    let e = Encoder::new(&base.encoder, 16 * 16, &mut rng).unwrap();
                    (e.clone(), e, 0.0, 0.0)
                }
            };
            let report = run_probe(&enc, &world.probe_data, &base.probe, seed).unwrap();
            let fresh = if cell_cfg.as_ref().map(|c| c.cir.enabled).unwrap_or(false) {
                format!(" fresh_cir {:.3} (chance {:.3})", fresh_cir_loss(&enc, &target, &world, &base, seed), (129.0f64).ln())
            } else {
                String::new()
            };
            eprintln!(
                "  {name:<12} F1 {:5.1} (l_tcl {ltcl:.4} l_cir {lcir:.4}) in {:?}\n               {}{}",
                report.mean_f1 * 100.0,
                t.elapsed(),
                cell_diagnostics(&enc, &world, seed),
                fresh,
            );
            if *name == "full" {
                full_enc = Some(enc.clone());
            }
            if *name == "tcl_sqrt" {
                tcl_enc = Some(enc.clone());
            }
            match table.iter_mut().find(|(n, _)| n == name) {
                Some((_, v)) => v.push(report.mean_f1 * 100.0),
                None => table.push((name.to_string(), vec![report.mean_f1 * 100.0])),
            }
        }
        let fe = full_enc.as_ref().unwrap();
        let te = tcl_enc.as_ref().unwrap();
        let px = &world.probe_data.pixels;
        let g_feat = mean_pair_cosine(fe, px, &world.pairs) - mean_pair_cosine(te, px, &world.pairs);
        let g_emb = pull_tcl_space(fe, px, &world.pairs) - pull_tcl_space(te, px, &world.pairs);
        let g_cir = pull_cir_space(fe, px, &world.pairs) - pull_cir_space(te, px, &world.pairs);
        eprintln!("  pull gap: features {g_feat:+.4}  tcl-emb {g_emb:+.4}  cir-emb {g_cir:+.4}");
        gaps_feat.push(g_feat);
        gaps_emb.push(g_emb);
        gaps_cir.push(g_cir);
    }

    println!("\ncell means over seeds {seeds:?}");
    for (name, vals) in &table {
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let rounded: Vec<f64> = vals.iter().map(|v| (v * 10.0).round() / 10.0).collect();
        println!("  {name:<12} {mean:6.2}  {rounded:?}");
    }
    let mf = gaps_feat.iter().sum::<f64>() / gaps_feat.len() as f64;
    let me = gaps_emb.iter().sum::<f64>() / gaps_emb.len() as f64;
    let mc = gaps_cir.iter().sum::<f64>() / gaps_cir.len() as f64;
    println!("  pull gap means: features {mf:+.4}  tcl-emb {me:+.4}  cir-emb {mc:+.4}");
}
