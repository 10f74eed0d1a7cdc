//! Paired toy trainings that switch one ingredient off at a time.
//!
//! Each arm is an ordinary `train` → `stylize` → `evaluate` sequence with its
//! own output directory and manifests, so any arm can be re-run alone.

use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use mvstyle::metrics::{list_images, MetricsReport};
use mvstyle::synthetic::{scene_views, write_toy_scene};
use mvstyle::training::{ConditionKind, TrainConfig};
use mvstyle::Result;
use serde::{Deserialize, Serialize};

use crate::manifest::RunManifest;
use crate::{
    cmd_evaluate, cmd_stylize, cmd_train, create_out, EvaluateArgs, Invocation, StylizeArgs, TrainArgs,
    CHECKPOINT_FILE, CONFIG_FILE,
};

/// Seed offset of the second scene used by the cross-scene study.
const OTHER_SCENE_SEED: u64 = 1000;
const VIEW_SHIFT: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Study {
    /// With and without the colour-histogram term.
    ColorAlignment,
    /// Image-derived condition versus a free learned embedding.
    Condition,
    /// Trained on another scene versus trained on the evaluated scene.
    Generalization,
    /// With and without the edge-structure term.
    Structure,
}

impl Study {
    pub const ALL: [Study; 4] = [Study::ColorAlignment, Study::Condition, Study::Generalization, Study::Structure];

    pub fn name(self) -> &'static str {
        match self {
            Study::ColorAlignment => "color-alignment",
            Study::Condition => "condition",
            Study::Generalization => "generalization",
            Study::Structure => "structure",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct AblateArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Base training config; defaults to the toy preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Runs seeds `0..seeds`; each seed gets its own synthetic scene.
    #[arg(long, default_value_t = 3)]
    pub seeds: u64,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long, value_delimiter = ',', default_values = ["color-alignment", "condition", "generalization", "structure"])]
    pub studies: Vec<Study>,
    #[arg(long, default_value_t = 4)]
    pub views: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Arm {
    Base,
    NoColorAlignment,
    NoStructure,
    LearnedCondition,
    /// Trained and evaluated on the second scene.
    NativeOther,
    /// Base checkpoint evaluated on the second scene.
    TransferOther,
}

impl Arm {
    fn dir(self) -> &'static str {
        match self {
            Arm::Base => "base",
            Arm::NoColorAlignment => "no_color_alignment",
            Arm::NoStructure => "no_structure",
            Arm::LearnedCondition => "learned_condition",
            Arm::NativeOther => "native_other",
            Arm::TransferOther => "transfer_other",
        }
    }

    fn configure(self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        match self {
            Arm::NoColorAlignment => cfg.weights.color_alignment = 0.0,
            Arm::NoStructure => cfg.weights.structure = 0.0,
            Arm::LearnedCondition => cfg.condition = ConditionKind::Learned,
            Arm::Base | Arm::NativeOther | Arm::TransferOther => {}
        }
        cfg
    }
}

/// Aggregate metrics of one arm at one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub seed: u64,
    pub arm: String,
    pub chd: f64,
    pub dsd: f64,
    pub flow_l1: Option<f64>,
}

/// One study at one seed: the metric of the arm with the ingredient and of
/// the arm without it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub study: Study,
    pub seed: u64,
    pub metric: String,
    pub with_arm: String,
    pub without_arm: String,
    pub with: f64,
    pub without: f64,
    /// Whether "with" is lower, for studies that predict a direction.
    pub expected_lower: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub study: Study,
    pub agreeing: usize,
    pub seeds: usize,
    pub majority: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub arms: Vec<ArmResult>,
    pub comparisons: Vec<Comparison>,
    pub verdicts: Vec<Verdict>,
}

impl AblationReport {
    pub fn verdict(&self, study: Study) -> Option<&Verdict> {
        self.verdicts.iter().find(|v| v.study == study)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("seed,arm,chd,dsd,flow_l1\n");
        for a in &self.arms {
            let flow = a.flow_l1.map_or(String::new(), |f| f.to_string());
            s += &format!("{},{},{},{},{}\n", a.seed, a.arm, a.chd, a.dsd, flow);
        }
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = format!("{:<5} {:<20} {:>8} {:>8} {:>8}\n", "seed", "arm", "CHD", "DSD", "flow-L1");
        for a in &self.arms {
            let flow = a.flow_l1.map_or("n/a".to_string(), |f| format!("{f:.4}"));
            s += &format!("{:<5} {:<20} {:>8.4} {:>8.4} {:>8}\n", a.seed, a.arm, a.chd, a.dsd, flow);
        }
        s += "\n";
        for c in &self.comparisons {
            let mark = match c.expected_lower {
                Some(true) => "as expected",
                Some(false) => "reversed",
                None => "",
            };
            s += &format!(
                "{:<16} seed {} {:<8} {} {:.4} vs {} {:.4} {}\n",
                c.study.name(),
                c.seed,
                c.metric,
                c.with_arm,
                c.with,
                c.without_arm,
                c.without,
                mark
            );
        }
        for v in &self.verdicts {
            s += &format!("{:<16} {}/{} seeds agree\n", v.study.name(), v.agreeing, v.seeds);
        }
        s
    }
}

struct SeedData {
    scene: PathBuf,
    style: PathBuf,
    other_scene: PathBuf,
}

fn write_seed_data(root: &Path, seed: u64, views: usize, size: usize) -> Result<SeedData> {
    let (scene, style) = write_toy_scene(root, views, size, seed)?;
    let other_scene = root.join("other_scene");
    std::fs::create_dir_all(&other_scene)?;
    for (i, v) in scene_views(views, size, VIEW_SHIFT, seed + OTHER_SCENE_SEED).iter().enumerate() {
        v.save_png(&other_scene.join(format!("view_{i:02}.png")))?;
    }
    Ok(SeedData { scene, style, other_scene })
}

/// Train (unless reusing `checkpoint`), stylize `eval_scene`, evaluate.
fn run_arm(
    dir: &Path,
    cfg: &TrainConfig,
    train_scene: &Path,
    eval_scene: &Path,
    style: &Path,
    checkpoint: Option<&Path>,
    manifest: &mut RunManifest,
    root: &Path,
) -> Result<MetricsReport> {
    create_out(dir)?;
    let checkpoint = match checkpoint {
        Some(ck) => ck.to_path_buf(),
        None => {
            let cfg_path = dir.join(CONFIG_FILE);
            std::fs::write(&cfg_path, cfg.to_toml())?;
            manifest.add_artifact(root, &cfg_path);
            let train = TrainArgs {
                config: Some(cfg_path),
                scene: train_scene.to_path_buf(),
                style: style.to_path_buf(),
                out: dir.join("train"),
                steps: None,
                seed: None,
                resume: None,
            };
            absorb(manifest, root, &train.out, &cmd_train(&train)?);
            train.out.join(CHECKPOINT_FILE)
        }
    };
    let stylize = StylizeArgs {
        checkpoint,
        input: eval_scene.to_path_buf(),
        out: dir.join("stylized"),
        style: Some(style.to_path_buf()),
        resolution: None,
    };
    absorb(manifest, root, &stylize.out, &cmd_stylize(&stylize)?);
    let evaluate = EvaluateArgs {
        stylized: stylize.out.clone(),
        content: eval_scene.to_path_buf(),
        style: style.to_path_buf(),
        out: dir.join("eval"),
    };
    let (m, report) = cmd_evaluate(&evaluate)?;
    absorb(manifest, root, &evaluate.out, &m);
    Ok(report)
}

fn absorb(manifest: &mut RunManifest, root: &Path, sub_out: &Path, sub: &RunManifest) {
    for a in &sub.artifacts {
        manifest.add_artifact(root, &sub_out.join(a));
    }
    manifest.add_artifact(root, &sub_out.join(crate::manifest::MANIFEST_FILE));
}

/// Writes `ablation.json`, `ablation.csv` and per-arm directories under
/// `out/seed_<n>/`.
pub fn cmd_ablate(a: &AblateArgs) -> Result<(RunManifest, AblationReport)> {
    let mut base = match &a.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::toy(),
    };
    if let Some(steps) = a.steps {
        base.steps = steps;
    }
    base.validate()?;
    if a.seeds == 0 || a.views < 2 || a.studies.is_empty() {
        return Err(mvstyle::Error::Config {
            field: "seeds/views/studies".into(),
            message: "need at least one seed, two views and one study".into(),
        });
    }
    create_out(&a.out)?;
    let mut manifest = RunManifest::new(Invocation::Ablate(a.clone()), crate::config_json(&base), None);
    if let Some(p) = &a.config {
        manifest.add_input(p)?;
    }

    let wants = |s: Study| a.studies.contains(&s);
    let mut arms = Vec::new();
    let mut comparisons = Vec::new();
    for seed in 0..a.seeds {
        let root = a.out.join(format!("seed_{seed}"));
        let data = write_seed_data(&root.join("data"), seed, a.views, base.resolution)?;
        for p in list_images(&data.scene)?.into_iter().chain(list_images(&data.other_scene)?) {
            manifest.add_artifact(&a.out, &p);
        }
        manifest.add_artifact(&a.out, &data.style);
        let mut cfg = base.clone();
        cfg.seed = seed;

        let mut run = |arm: Arm, train_scene: &Path, eval_scene: &Path, ck: Option<&Path>| -> Result<MetricsReport> {
            log::info!("seed {seed}: arm {}", arm.dir());
            let report = run_arm(
                &root.join(arm.dir()),
                &arm.configure(&cfg),
                train_scene,
                eval_scene,
                &data.style,
                ck,
                &mut manifest,
                &a.out,
            )?;
            arms.push(ArmResult {
                seed,
                arm: arm.dir().into(),
                chd: report.aggregate.chd,
                dsd: report.aggregate.dsd,
                flow_l1: report.aggregate.flow_l1,
            });
            Ok(report)
        };

        let base_report = run(Arm::Base, &data.scene, &data.scene, None)?;
        let flow = |r: &MetricsReport| r.aggregate.flow_l1.unwrap_or(0.0);
        if wants(Study::ColorAlignment) {
            let off = run(Arm::NoColorAlignment, &data.scene, &data.scene, None)?;
            comparisons.push(compare(Study::ColorAlignment, seed, "chd", base_report.aggregate.chd, off.aggregate.chd, true));
        }
        if wants(Study::Structure) {
            let off = run(Arm::NoStructure, &data.scene, &data.scene, None)?;
            comparisons.push(compare(Study::Structure, seed, "flow_l1", flow(&base_report), flow(&off), true));
        }
        if wants(Study::Condition) {
            let learned = run(Arm::LearnedCondition, &data.scene, &data.scene, None)?;
            comparisons.push(compare(Study::Condition, seed, "chd", base_report.aggregate.chd, learned.aggregate.chd, false));
        }
        if wants(Study::Generalization) {
            let base_ck = root.join(Arm::Base.dir()).join("train").join(CHECKPOINT_FILE);
            let native = run(Arm::NativeOther, &data.other_scene, &data.other_scene, None)?;
            let transfer = run(Arm::TransferOther, &data.scene, &data.other_scene, Some(&base_ck))?;
            comparisons.push(compare(Study::Generalization, seed, "flow_l1", flow(&native), flow(&transfer), false));
        }
    }

    let verdicts = a
        .studies
        .iter()
        .filter(|s| matches!(s, Study::ColorAlignment | Study::Structure))
        .map(|&study| {
            let rows: Vec<&Comparison> = comparisons.iter().filter(|c| c.study == study).collect();
            let agreeing = rows.iter().filter(|c| c.expected_lower == Some(true)).count();
            Verdict {
                study,
                agreeing,
                seeds: rows.len(),
                majority: 2 * agreeing > rows.len(),
            }
        })
        .collect();
    let report = AblationReport { arms, comparisons, verdicts };

    let json = a.out.join("ablation.json");
    std::fs::write(&json, serde_json::to_string_pretty(&report).expect("report serializes") + "\n")?;
    manifest.add_artifact(&a.out, &json);
    let csv = a.out.join("ablation.csv");
    std::fs::write(&csv, report.to_csv())?;
    manifest.add_artifact(&a.out, &csv);
    manifest.write(&a.out)?;
    Ok((manifest, report))
}

/// `with` is the arm that has the ingredient (for generalization: trained on
/// the evaluated scene).
fn compare(study: Study, seed: u64, metric: &str, with: f64, without: f64, directional: bool) -> Comparison {
    let (with_arm, without_arm) = match study {
        Study::ColorAlignment => (Arm::Base, Arm::NoColorAlignment),
        Study::Structure => (Arm::Base, Arm::NoStructure),
        Study::Condition => (Arm::Base, Arm::LearnedCondition),
        Study::Generalization => (Arm::NativeOther, Arm::TransferOther),
    };
    Comparison {
        study,
        seed,
        metric: metric.into(),
        with_arm: with_arm.dir().into(),
        without_arm: without_arm.dir().into(),
        with,
        without,
        expected_lower: directional.then_some(with < without),
    }
}
