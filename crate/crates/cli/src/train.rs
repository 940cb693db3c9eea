use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use dropvid::checkpoint::{
    flow_checkpoint, flow_from_checkpoint, stage1_checkpoint, stage1_from_checkpoint, stage2_checkpoint, Checkpoint,
};
use dropvid::config::TrainConfig;
use dropvid::initial::InitialNet;
use dropvid::io::{read_clip, read_frames};
use dropvid::training::{new_initial_net, new_video_net, train_stage1, train_stage2, PairedDataset};
use dropvid::videonet::{Ablation, VideoNet};
use dropvid::VideoClip;

use crate::failure::{Failure, EXIT_MISSING};
use crate::manifest::{Run, FILE_NAME};
use crate::{rain_dir, resolve_seed, AblationFlags};

pub const STAGE1_CKPT: &str = "stage1.ckpt";
pub const STAGE2_CKPT: &str = "stage2.ckpt";
pub const FLOW_CKPT: &str = "flow.ckpt";

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    pub stage: u8,
    /// `key = value` config file; built-in defaults when absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Clip directories. Stage one needs `rain/` and `clean/`; stage two
    /// reads `rain/` or the directory itself.
    #[arg(long, required = true, num_args = 1..)]
    pub data: Vec<PathBuf>,
    /// Frozen stage-one checkpoint; required for stage two.
    #[arg(long)]
    pub stage1_ckpt: Option<PathBuf>,
    /// Flow checkpoint to start stage two from instead of a fresh estimator.
    #[arg(long)]
    pub flow_ckpt: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides `max_steps` from the config.
    #[arg(long)]
    pub max_steps: Option<u64>,
    /// Overrides the config seed; falls back to `DROPVID_SEED`.
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub ablation: AblationFlags,
}

/// Config file (or defaults) with command-line overrides applied.
pub fn load_config(
    path: Option<&Path>,
    max_steps: Option<u64>,
    seed: Option<u64>,
    flags: AblationFlags,
) -> Result<TrainConfig, Failure> {
    let mut cfg = match path {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    if let Some(n) = max_steps {
        cfg.max_steps = n;
    }
    cfg.seed = resolve_seed(seed, cfg.seed)?;
    let a = cfg.ablation();
    cfg.set_ablation(Ablation {
        no_mask: a.no_mask || flags.no_mask,
        no_initialnet: a.no_initialnet || flags.no_initialnet,
        no_alignment: a.no_alignment || flags.no_alignment,
        no_temporal: a.no_temporal || flags.no_temporal,
    });
    cfg.validate()?;
    Ok(cfg)
}

/// Config as written to a config file, one string per key.
pub fn config_snapshot(cfg: &TrainConfig) -> serde_json::Value {
    let map: serde_json::Map<String, serde_json::Value> = cfg
        .to_config_string()
        .lines()
        .filter_map(|l| l.split_once(" = "))
        .map(|(k, v)| (k.to_string(), serde_json::Value::String(v.to_string())))
        .collect();
    serde_json::Value::Object(map)
}

pub fn write_jsonl(path: &Path, lines: impl Iterator<Item = String>) -> Result<(), Failure> {
    let mut s = String::new();
    for l in lines {
        s.push_str(&l);
        s.push('\n');
    }
    fs::write(path, s).map_err(|e| Failure::io(path, e))
}

pub fn load_stage1(path: Option<&Path>, run: &mut Run) -> Result<InitialNet, Failure> {
    let path = path.ok_or_else(|| Failure::new(EXIT_MISSING, "stage two needs --stage1-ckpt"))?;
    let net = stage1_from_checkpoint(&Checkpoint::load(path)?)?;
    run.consumed(path)?;
    Ok(net)
}

/// Fresh stage-two network, optionally starting from a saved flow estimator.
pub fn initial_video_net(cfg: &TrainConfig, flow: Option<&Path>, run: &mut Run) -> Result<VideoNet, Failure> {
    let mut net = new_video_net(cfg);
    if let Some(p) = flow {
        let mut f = flow_from_checkpoint(&Checkpoint::load(p)?)?;
        f.settings.pairing = cfg.flow_pairing;
        f.settings.finetune_lr = cfg.lr_flow_finetune;
        net.flow = f;
        run.consumed(p)?;
    }
    Ok(net)
}

pub fn read_stage2_clips(dirs: &[PathBuf], radius: usize) -> Result<Vec<VideoClip>, Failure> {
    dirs.iter()
        .map(|d| read_clip(&rain_dir(d), radius).map_err(Failure::from))
        .collect()
}

/// Saves `stage2.ckpt` and `flow.ckpt` under `out` and records them.
pub fn save_stage2(net: &VideoNet, out: &Path, run: &mut Run) -> Result<(), Failure> {
    for (name, ckpt) in [(STAGE2_CKPT, stage2_checkpoint(net)), (FLOW_CKPT, flow_checkpoint(&net.flow))] {
        let p = out.join(name);
        ckpt.save(&p)?;
        run.produced(&p)?;
    }
    Ok(())
}

pub fn train(a: TrainArgs, run: &mut Run) -> Result<(), Failure> {
    run.write_to(a.out.join(FILE_NAME));
    let cfg = load_config(a.config.as_deref(), a.max_steps, a.seed, a.ablation)?;
    run.manifest.seed = Some(cfg.seed);
    run.manifest.config = config_snapshot(&cfg);
    run.detail("stage", a.stage);
    fs::create_dir_all(&a.out).map_err(|e| Failure::io(&a.out, e))?;
    if a.stage == 1 {
        let mut rain = Vec::new();
        let mut clean = Vec::new();
        for d in &a.data {
            rain.extend(read_frames(&d.join("rain"))?);
            clean.extend(read_frames(&d.join("clean"))?);
        }
        let data = PairedDataset::new(rain, clean)?;
        let res = train_stage1(&data, new_initial_net(&cfg), &cfg)?;
        let p = a.out.join(STAGE1_CKPT);
        stage1_checkpoint(&res.net).save(&p)?;
        run.produced(&p)?;
        write_jsonl(&a.out.join("stage1_loss.jsonl"), res.log.iter().map(|r| r.to_json_line()))?;
        if let (Some(f), Some(l)) = (res.log.first(), res.log.last()) {
            eprintln!("stage 1: {} steps, total loss {:.5} -> {:.5}", res.log.len(), f.total, l.total);
        }
        return Ok(());
    }
    let stage1 = load_stage1(a.stage1_ckpt.as_deref(), run)?;
    let clips = read_stage2_clips(&a.data, cfg.window_radius)?;
    let net = initial_video_net(&cfg, a.flow_ckpt.as_deref(), run)?;
    let res = train_stage2(&clips, &stage1, net, &cfg)?;
    save_stage2(&res.net, &a.out, run)?;
    write_jsonl(&a.out.join("stage2_loss.jsonl"), res.log.iter().map(|r| r.to_json_line()))?;
    run.detail("stage1_param_hash_before", &res.stage1_hash.0);
    run.detail("stage1_param_hash_after", &res.stage1_hash.1);
    if let (Some(f), Some(l)) = (res.log.first(), res.log.last()) {
        eprintln!("stage 2: {} steps, L_all {:.5} -> {:.5}", res.log.len(), f.total, l.total);
    }
    Ok(())
}
