//! The two-step procedure as run by the `modalid` binary: synthetic data
//! generation, identification, mode-shape interpolation and evaluation.
//!
//! Every command is a pure function of the configuration, its input files
//! and the seed. Identification writes a checkpoint after each stage so a
//! later run can resume from any stage with bit-identical results.

use crate::extract::{align_rigid, lmfd_to_modal, prune_table_text, rigid_shapes};
use crate::frf::{
    closed_to_open, compensate_delay, estimate_delay, etfe_robust, ChannelTag, FrfDataset, MultisineSpec,
};
use crate::lmfd::{build_structure, LmfdModel};
use crate::modal::{ModalModel, ModelFile, ScheduleMap};
use crate::solver::{
    cost_of_responses, extend_outputs, lm_refine, sk_solve, trace_from_text, trace_to_text, w_max_heuristic,
    weighting_inv_truncated, LmOptions, LmfdParam, ModalParam, SkOptions, SolveReport, TraceEntry, WeightingSpec,
};
use crate::synth::{make_plate, mix_seed, run_campaign, CampaignSpec, ControllerSpec, PlateSpec};
use crate::textio::{fmt_f64, parse_finite, write_file};
use crate::tps::{default_lambda_grid, export_grid, interpolate_mode_shapes};
use crate::{Coord, Error, Result, C64};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

/// A number or one of a few keywords in the configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum NumberOr {
    Number(f64),
    Word(String),
}

impl NumberOr {
    fn word(w: &str) -> Self {
        NumberOr::Word(w.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stages {
    pub synth: bool,
    pub identify: bool,
    pub interp: bool,
    pub eval: bool,
}

impl Default for Stages {
    fn default() -> Self {
        Self {
            synth: true,
            identify: true,
            interp: true,
            eval: false,
        }
    }
}

/// Synthetic plate; defaults to the standard 16-sensor, 7-actuator layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlateConfig {
    /// Output SNR in dB, or `"none"` for noiseless data.
    pub snr_db: NumberOr,
    /// Number of flexible modes kept from the standard plate (at most 9).
    pub n_flex: usize,
    pub damping_ratio: f64,
}

impl Default for PlateConfig {
    fn default() -> Self {
        Self {
            snr_db: NumberOr::Number(40.0),
            n_flex: 9,
            damping_ratio: 0.02,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub sample_rate: f64,
    /// Multisine bin spacing (Hz); the period is `sample_rate / bin_spacing`.
    pub bin_spacing_hz: f64,
    /// Highest excited frequency; all bins from `bin_spacing_hz` up to it
    /// are excited.
    pub f_max_hz: f64,
    pub amplitude: f64,
    pub realizations: usize,
    pub periods: usize,
    pub warmup_periods: usize,
    pub closed_loop: bool,
    pub in_plane_channels: usize,
    /// Also write the raw time records (large).
    pub write_records: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            sample_rate: 8192.0,
            bin_spacing_hz: 0.5,
            f_max_hz: 1000.0,
            amplitude: 1.0,
            realizations: 8,
            periods: 4,
            warmup_periods: 1,
            closed_loop: true,
            in_plane_channels: 4,
            write_records: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IdentifyConfig {
    /// Modes of the LMFD model, including computational ones.
    pub n_m: usize,
    pub n_rb: usize,
    /// Output indices used for the parametric fit; the rest are added by
    /// the linear extension.
    pub subset: Vec<usize>,
    /// Weight clipping level, or `"auto"` for the 95th percentile of the
    /// inverse-FRF weights below `w_max_below_hz`.
    pub w_max: NumberOr,
    pub w_max_below_hz: f64,
    pub i_sk: usize,
    pub i_gn: usize,
    pub i_gn_mod: usize,
    pub rho_keep: f64,
    /// Delay compensation: seconds, `"hold"` (half a sample, zero-order
    /// hold), `"estimate"` or `"none"`.
    pub delay: NumberOr,
    /// Allowed relative cost increase at the LMFD-to-modal handoff.
    pub handoff_bound: f64,
    /// Sensor coordinates of the FRF outputs (m); defaults to the standard
    /// plate layout.
    pub sensor_coords: Option<Vec<Coord>>,
}

impl Default for IdentifyConfig {
    fn default() -> Self {
        Self {
            n_m: 14,
            n_rb: 3,
            subset: vec![0, 9, 14],
            w_max: NumberOr::word("auto"),
            w_max_below_hz: 80.0,
            i_sk: 20,
            i_gn: 100,
            i_gn_mod: 100,
            rho_keep: 0.01,
            delay: NumberOr::word("hold"),
            handoff_bound: 1.0,
            sensor_coords: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InterpConfig {
    /// Smoothing grid in normalized units; empty for the default grid.
    pub lambda_grid: Vec<f64>,
    /// Points per side of the exported shape grids.
    pub grid_points: usize,
}

impl Default for InterpConfig {
    fn default() -> Self {
        Self {
            lambda_grid: Vec::new(),
            grid_points: 41,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Point-of-interest offsets, one per evaluated output.
    pub offsets: Vec<Coord>,
    /// Frequencies (Hz) of the position-dependent FRF export.
    pub frequencies_hz: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            offsets: vec![[0.0, 0.0]],
            frequencies_hz: crate::tps::log_grid(1.0, 1000.0, 25),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub out: PathBuf,
    /// FRF input of `identify`; defaults to the synthesized `frf.txt`.
    pub frf: Option<PathBuf>,
    /// Model input of `interp`/`eval`; defaults to the pipeline outputs.
    pub model: Option<PathBuf>,
    pub trajectory: Option<PathBuf>,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            out: PathBuf::from("out"),
            frf: None,
            model: None,
            trajectory: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub stages: Stages,
    pub plate: PlateConfig,
    pub experiment: ExperimentConfig,
    pub identify: IdentifyConfig,
    pub interp: InterpConfig,
    pub eval: EvalConfig,
    pub paths: PathsConfig,
}

/// Delay compensation rule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DelayRule {
    None,
    Fixed(f64),
    Hold,
    Estimate,
}

impl PipelineConfig {
    pub fn from_text(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::invalid(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_text(&text)
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    pub fn snr_db(&self) -> Result<Option<f64>> {
        match &self.plate.snr_db {
            NumberOr::Number(v) if v.is_finite() => Ok(Some(*v)),
            NumberOr::Word(w) if w == "none" => Ok(None),
            other => Err(Error::invalid(format!(
                "plate.snr_db must be a finite number or \"none\", got {other:?}"
            ))),
        }
    }

    pub fn delay_rule(&self) -> Result<DelayRule> {
        match &self.identify.delay {
            NumberOr::Number(v) if *v >= 0.0 && v.is_finite() => Ok(DelayRule::Fixed(*v)),
            NumberOr::Word(w) if w == "hold" => Ok(DelayRule::Hold),
            NumberOr::Word(w) if w == "estimate" => Ok(DelayRule::Estimate),
            NumberOr::Word(w) if w == "none" => Ok(DelayRule::None),
            other => Err(Error::invalid(format!(
                "identify.delay must be seconds >= 0, \"hold\", \"estimate\" or \"none\", got {other:?}"
            ))),
        }
    }

    /// `None` selects the heuristic.
    pub fn w_max(&self) -> Result<Option<f64>> {
        match &self.identify.w_max {
            NumberOr::Number(v) if *v > 0.0 => Ok(Some(*v)),
            NumberOr::Word(w) if w == "auto" => Ok(None),
            other => Err(Error::invalid(format!(
                "identify.w_max must be positive or \"auto\", got {other:?}"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.snr_db()?;
        self.delay_rule()?;
        self.w_max()?;
        let p = &self.plate;
        if p.n_flex > PlateSpec::standard().n_flex() {
            return Err(Error::invalid(format!("plate.n_flex = {} exceeds 9", p.n_flex)));
        }
        if !(p.damping_ratio > 0.0 && p.damping_ratio < 1.0) {
            return Err(Error::invalid("plate.damping_ratio must lie in (0, 1)"));
        }
        let e = &self.experiment;
        if !(e.sample_rate > 0.0 && e.bin_spacing_hz > 0.0 && e.f_max_hz >= e.bin_spacing_hz) {
            return Err(Error::invalid(
                "experiment rates must be positive with f_max_hz >= bin_spacing_hz",
            ));
        }
        let ratio = e.sample_rate / e.bin_spacing_hz;
        if (ratio - ratio.round()).abs() > 1e-9 * ratio {
            return Err(Error::invalid(
                "experiment.sample_rate must be an integer multiple of bin_spacing_hz",
            ));
        }
        if 2.0 * e.f_max_hz >= e.sample_rate {
            return Err(Error::invalid("experiment.f_max_hz must lie below Nyquist"));
        }
        if e.realizations == 0 || e.periods < 2 {
            return Err(Error::invalid("experiment needs >= 1 realization and >= 2 periods"));
        }
        let id = &self.identify;
        if id.subset.is_empty() {
            return Err(Error::invalid("identify.subset is empty"));
        }
        let mut sorted = id.subset.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != id.subset.len() {
            return Err(Error::invalid("identify.subset has repeated outputs"));
        }
        if id.n_m < id.n_rb {
            return Err(Error::invalid("identify.n_m must be at least n_rb"));
        }
        if !(id.rho_keep >= 0.0 && id.w_max_below_hz > 0.0 && id.handoff_bound >= 0.0) {
            return Err(Error::invalid(
                "identify.rho_keep, w_max_below_hz and handoff_bound must be nonnegative",
            ));
        }
        if self.interp.lambda_grid.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
            return Err(Error::invalid("interp.lambda_grid values must be finite and >= 0"));
        }
        if self.eval.frequencies_hz.iter().any(|f| !(*f > 0.0 && f.is_finite())) {
            return Err(Error::invalid("eval.frequencies_hz must be positive"));
        }
        Ok(())
    }

    /// Plate specification derived from the configuration.
    pub fn plate_spec(&self) -> Result<PlateSpec> {
        let mut spec = PlateSpec::standard();
        let n = self.plate.n_flex;
        spec.frequencies_hz.truncate(n);
        spec.shapes.truncate(n);
        spec.damping_ratios = vec![self.plate.damping_ratio; n];
        spec.snr_db = self.snr_db()?;
        spec.seed = self.seed;
        Ok(spec)
    }

    pub fn multisine(&self) -> MultisineSpec {
        let e = &self.experiment;
        let n = (e.sample_rate / e.bin_spacing_hz).round() as usize;
        let top = (e.f_max_hz / e.bin_spacing_hz).floor() as usize;
        MultisineSpec {
            bins: (1..=top).collect(),
            amplitude: e.amplitude,
            seed: mix_seed(self.seed, 0x5eed, 1),
            period_len: n,
            sample_rate: e.sample_rate,
        }
    }

    pub fn campaign(&self) -> CampaignSpec {
        let e = &self.experiment;
        CampaignSpec {
            multisine: self.multisine(),
            realizations: e.realizations,
            periods: e.periods,
            warmup_periods: e.warmup_periods,
            controller: e.closed_loop.then(ControllerSpec::corners),
            in_plane_channels: if e.closed_loop { e.in_plane_channels } else { 0 },
        }
    }

    pub fn sensor_coords(&self) -> Vec<Coord> {
        self.identify
            .sensor_coords
            .clone()
            .unwrap_or_else(|| PlateSpec::standard().sensors)
    }

    /// Plate outline `[lower-left, upper-right]`.
    pub fn domain(&self) -> [Coord; 2] {
        let s = PlateSpec::standard().size;
        [[-s[0] / 2.0, -s[1] / 2.0], [s[0] / 2.0, s[1] / 2.0]]
    }

    pub fn frf_path(&self) -> PathBuf {
        self.paths
            .frf
            .clone()
            .unwrap_or_else(|| self.paths.out.join(files::FRF))
    }
}

/// File names inside the output directory.
pub mod files {
    pub const TRUTH: &str = "truth.toml";
    pub const FRF: &str = "frf.txt";
    pub const FRF_OPEN: &str = "frf_open.txt";
    pub const RECORDS: &str = "records";
    pub const LMFD_SK: &str = "lmfd_sk.toml";
    pub const LMFD_LM: &str = "lmfd_lm.toml";
    pub const TRANSFORM: &str = "modal_transform.toml";
    pub const MODAL_SUBSET: &str = "modal_subset.toml";
    pub const MODEL: &str = "model.toml";
    pub const PRUNING: &str = "pruning.txt";
    pub const TRACE: &str = "trace.txt";
    pub const BODE: &str = "bode.txt";
    pub const SUMMARY: &str = "summary.toml";
    pub const MODEL_PD: &str = "model_pd.toml";
    pub const GRIDS: &str = "grids";
    pub const LOOCV: &str = "loocv.txt";
    pub const SHAPES: &str = "eval_shapes.txt";
    pub const EVAL_FRF: &str = "eval_frf.txt";
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::invalid(format!("cannot create {}: {e}", dir.display())))
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::invalid(format!("{what} {} does not exist", path.display())))
    }
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub truth: ModalModel,
    pub frf: FrfDataset,
}

/// Simulates the multisine campaign on the synthetic plate and writes the
/// ground-truth model and the nonparametric FRF estimate.
pub fn cmd_synth(cfg: &PipelineConfig) -> Result<SynthOutput> {
    cfg.validate()?;
    let out = &cfg.paths.out;
    ensure_dir(out)?;
    let plate = make_plate(&cfg.plate_spec()?).map_err(|e| e.in_stage("synth"))?;
    let campaign = cfg.campaign();
    if campaign.controller.is_none() && plate.model().n_rb() > 0 {
        log::warn!(
            "open-loop records of a free plate drift (rigid-body modes integrate the input); \
             the FRF estimate is unreliable"
        );
    }
    let records = run_campaign(&plate, &campaign).map_err(|e| e.in_stage("synth"))?;
    let frf = etfe_robust(&records, &campaign.multisine).map_err(|e| e.in_stage("synth"))?;
    ModelFile::new(plate.model().clone()).write(&out.join(files::TRUTH))?;
    frf.write(&out.join(files::FRF))?;
    if cfg.experiment.write_records {
        let dir = out.join(files::RECORDS);
        ensure_dir(&dir)?;
        for (i, r) in records.iter().enumerate() {
            write_file(&dir.join(format!("exp_{i:03}.txt")), &r.to_text())?;
        }
    }
    log::info!(
        "synth: {} experiments, FRF {:?} on {} bins",
        records.len(),
        frf.shape(),
        frf.n_freq()
    );
    Ok(SynthOutput {
        truth: plate.model().clone(),
        frf,
    })
}

/// Identification stages in execution order; `--stage` resumes at one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Sk,
    Lm,
    Transform,
    ModalLm,
    Extend,
}

impl Stage {
    pub const ALL: [Stage; 5] = [Stage::Sk, Stage::Lm, Stage::Transform, Stage::ModalLm, Stage::Extend];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Sk => "sk",
            Stage::Lm => "lm",
            Stage::Transform => "transform",
            Stage::ModalLm => "modal-lm",
            Stage::Extend => "extend",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Stage::ALL.into_iter().find(|st| st.as_str() == s).ok_or_else(|| {
            Error::invalid(format!(
                "unknown stage `{s}` (expected one of sk, lm, transform, modal-lm, extend)"
            ))
        })
    }

    fn status_file(self) -> String {
        format!("status_{}.toml", self.as_str())
    }

    fn trace_file(self) -> String {
        format!("trace_{}.txt", self.as_str())
    }
}

/// Per-stage outcome, also written as a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageStatus {
    pub stage: String,
    pub termination: String,
    pub converged: bool,
    pub iterations: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub oscillation: bool,
    pub warnings: Vec<String>,
}

impl StageStatus {
    fn from_report(stage: Stage, rep: &SolveReport) -> Self {
        Self {
            stage: stage.as_str().into(),
            termination: rep.termination.as_str().into(),
            converged: rep.termination.converged(),
            iterations: rep.iterations,
            initial_cost: rep.initial_cost(),
            final_cost: rep.best_cost(),
            oscillation: rep.oscillation,
            warnings: rep.warnings.clone(),
        }
    }

    fn linear(stage: Stage, initial_cost: f64, final_cost: f64, warnings: Vec<String>) -> Self {
        Self {
            stage: stage.as_str().into(),
            termination: "linear".into(),
            converged: true,
            iterations: 1,
            initial_cost,
            final_cost,
            oscillation: false,
            warnings,
        }
    }
}

/// Convergence-trace properties checked on every identification run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceChecks {
    /// The SK cost rose somewhere (informational).
    pub sk_oscillation: bool,
    /// Accepted LMFD LM steps never increase the cost.
    pub lm_monotone: bool,
    /// `V(modal start) / V(LMFD end) - 1`.
    pub handoff_increase: f64,
    pub handoff_bounded: bool,
    /// `V(modal start) - V(modal end)`, always >= 0 when valid.
    pub modal_decrease: f64,
    pub modal_monotone: bool,
}

impl TraceChecks {
    pub fn ok(&self) -> bool {
        self.lm_monotone && self.handoff_bounded && self.modal_decrease >= 0.0 && self.modal_monotone
    }
}

fn accepted_monotone(trace: &[TraceEntry], stage: &str) -> bool {
    let acc: Vec<f64> = trace
        .iter()
        .filter(|e| e.stage == stage && e.accepted)
        .map(|e| e.cost)
        .collect();
    acc.windows(2).all(|w| w[1] <= w[0])
}

/// Checks the trace shape: nonmonotone SK is allowed, LM segments must be
/// nonincreasing, and the handoff increase must stay below `bound` relative
/// to the LMFD cost (with an absolute floor at `1e-12` of the SK start).
pub fn check_trace(trace: &[TraceEntry], bound: f64) -> TraceChecks {
    let costs = |stage: &str| -> Vec<f64> {
        trace
            .iter()
            .filter(|e| e.stage == stage && e.accepted)
            .map(|e| e.cost)
            .collect()
    };
    let sk = costs(Stage::Sk.as_str());
    let lm = costs(Stage::Lm.as_str());
    let modal = costs(Stage::ModalLm.as_str());
    let v0 = sk.first().copied().unwrap_or(0.0);
    let v_lm = lm
        .last()
        .copied()
        .or(sk.iter().copied().reduce(f64::min))
        .unwrap_or(0.0);
    let v_h = modal.first().copied().unwrap_or(v_lm);
    let v_end = modal.last().copied().unwrap_or(v_h);
    let floor = 1e-12 * v0;
    TraceChecks {
        sk_oscillation: sk.windows(2).any(|w| w[1] > w[0]),
        lm_monotone: accepted_monotone(trace, Stage::Lm.as_str()),
        handoff_increase: if v_lm > 0.0 { v_h / v_lm - 1.0 } else { 0.0 },
        handoff_bounded: v_h <= v_lm * (1.0 + bound) + floor,
        modal_decrease: v_h - v_end,
        modal_monotone: accepted_monotone(trace, Stage::ModalLm.as_str()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub tau: f64,
    pub w_max: f64,
    pub subset: Vec<usize>,
    pub n_m_lmfd: usize,
    pub n_m_modal: usize,
    pub stages: Vec<StageStatus>,
    pub checks: TraceChecks,
    /// Weighted cost of the final model on all outputs.
    pub full_cost: f64,
    pub extension_residuals: Vec<f64>,
    pub frequencies_hz: Vec<f64>,
    pub damping_ratios: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct IdentifyOutput {
    pub model: ModalModel,
    pub summary: Summary,
    pub trace: Vec<TraceEntry>,
}

impl IdentifyOutput {
    /// All stages converged and every trace check passed.
    pub fn converged(&self) -> bool {
        self.summary.stages.iter().all(|s| s.converged) && self.summary.checks.ok()
    }

    pub fn warnings(&self) -> Vec<String> {
        let mut w: Vec<String> = self
            .summary
            .stages
            .iter()
            .flat_map(|s| s.warnings.iter().map(move |m| format!("{}: {m}", s.stage)))
            .collect();
        for s in &self.summary.stages {
            if !s.converged {
                w.push(format!(
                    "{}: stopped at the iteration limit ({})",
                    s.stage, s.termination
                ));
            }
        }
        if !self.summary.checks.ok() {
            w.push(format!("trace checks failed: {:?}", self.summary.checks));
        }
        w
    }
}

/// Open-loop, delay-compensated data: closed-loop datasets are converted
/// and restricted to the out-of-plane channels first.
pub fn prepare_frf(cfg: &PipelineConfig, raw: &FrfDataset) -> Result<(FrfDataset, f64)> {
    let closed = raw.outputs().iter().any(|c| c.tag == ChannelTag::Uc);
    let ol = if closed {
        closed_to_open(raw)?.out_of_plane()?
    } else {
        raw.out_of_plane()?
    };
    let tau = match cfg.delay_rule()? {
        DelayRule::None => 0.0,
        DelayRule::Fixed(t) => t,
        DelayRule::Hold => 0.5 / cfg.experiment.sample_rate,
        DelayRule::Estimate => estimate_delay(&ol)?.0,
    };
    Ok((compensate_delay(&ol, tau)?, tau))
}

struct Checkpoints<'a> {
    dir: &'a Path,
    resume: Option<Stage>,
}

impl Checkpoints<'_> {
    fn reuse(&self, stage: Stage) -> bool {
        self.resume.is_some_and(|r| stage < r)
    }

    fn save(&self, stage: Stage, status: &StageStatus, trace: &[TraceEntry]) -> Result<()> {
        let text = toml::to_string(status).map_err(|e| Error::invalid(e.to_string()))?;
        write_file(&self.dir.join(stage.status_file()), &text)?;
        write_file(&self.dir.join(stage.trace_file()), &trace_to_text(trace))
    }

    fn load(&self, stage: Stage) -> Result<(StageStatus, Vec<TraceEntry>)> {
        let sp = self.dir.join(stage.status_file());
        let tp = self.dir.join(stage.trace_file());
        require_file(&sp, &format!("checkpoint for stage `{}`", stage.as_str()))?;
        require_file(&tp, &format!("trace for stage `{}`", stage.as_str()))?;
        let status: StageStatus = toml::from_str(&std::fs::read_to_string(sp)?)?;
        let trace = trace_from_text(&std::fs::read_to_string(tp)?)?;
        Ok((status, trace))
    }

    fn artifact(&self, name: &str, stage: Stage) -> Result<PathBuf> {
        let p = self.dir.join(name);
        require_file(&p, &format!("checkpoint for stage `{}`", stage.as_str()))?;
        Ok(p)
    }
}

/// Modal LM; flexible modes that leave the stable region are dropped and
/// the refinement restarted from the remaining modes.
fn modal_refine(
    start: &ModalModel,
    frf: &FrfDataset,
    w: &WeightingSpec,
    max_iter: usize,
) -> Result<(ModalModel, SolveReport)> {
    let opts = LmOptions {
        max_iter,
        stage: Stage::ModalLm.as_str().into(),
        ..LmOptions::default()
    };
    let mut model = start.clone();
    let mut notes = Vec::new();
    let mut trace: Vec<TraceEntry> = Vec::new();
    for _ in 0..=start.n_modes() {
        let mp = ModalParam::for_model(&model);
        let (theta, mut rep) = lm_refine(&mp, &mp.to_theta(&model), frf, w, &opts)?;
        if let Some(prev) = trace.last() {
            let offset = prev.iteration;
            rep.trace.iter_mut().for_each(|e| e.iteration += offset);
        }
        let (omega2, zeta, l, r) = mp.unpack(&theta);
        let bad: Vec<usize> = (0..omega2.len())
            .filter(|&i| omega2[i] != 0.0 && !(omega2[i] > 0.0 && zeta[i] >= 0.0))
            .collect();
        if bad.is_empty() || bad.len() == omega2.len() {
            let fitted = mp.to_model(&theta, model.sensor_coords().to_vec())?;
            let base = trace.len();
            trace.extend(rep.trace.iter().cloned());
            rep.best_index += base;
            rep.trace = trace;
            rep.warnings.splice(0..0, notes);
            return Ok((fitted, rep));
        }
        for &i in &bad {
            notes.push(format!(
                "dropped mode with omega2 = {:.6e}, zeta = {:.6e} outside the stable region",
                omega2[i], zeta[i]
            ));
            log::warn!("{}", notes.last().unwrap());
        }
        let keep: Vec<usize> = (0..omega2.len()).filter(|i| !bad.contains(i)).collect();
        // keep the part of the trace that led to the invalid point for the record
        trace.extend(rep.trace.iter().cloned().map(|mut e| {
            e.accepted = false;
            e
        }));
        model = ModalModel::new(
            keep.iter().map(|&i| omega2[i]).collect(),
            keep.iter().map(|&i| zeta[i]).collect(),
            l.select_columns(keep.iter()),
            r.select_rows(keep.iter()),
            model.sensor_coords().to_vec(),
        )?;
    }
    Err(Error::singular("modal refinement", "no stable modal model"))
}

/// Mode-shape rows of the full output set in original order, with the
/// fitted subset rows kept and the other rows from the linear extension.
fn extend_to_all(
    sub: &ModalModel,
    frf: &FrfDataset,
    w: &WeightingSpec,
    subset: &[usize],
    coords: &[Coord],
) -> Result<(ModalModel, Vec<f64>)> {
    let p = frf.shape().0;
    let rest: Vec<usize> = (0..p).filter(|i| !subset.contains(i)).collect();
    let q: Vec<usize> = (0..frf.shape().1).collect();
    let mut l = DMatrix::zeros(p, sub.n_modes());
    for (k, &i) in subset.iter().enumerate() {
        l.set_row(i, &sub.mode_shapes().row(k));
    }
    let mut residuals = vec![0.0; p];
    if !rest.is_empty() {
        let ext = extend_outputs(sub, &frf.select(&rest, &q)?, &w.select(&rest, &q)?)?;
        for (k, &i) in rest.iter().enumerate() {
            l.set_row(i, &ext.rows.row(k));
            residuals[i] = ext.residual[k];
        }
    }
    let model = ModalModel::new(
        sub.omega2().to_vec(),
        sub.zeta().to_vec(),
        l,
        sub.input_matrix().clone(),
        coords.to_vec(),
    )?;
    let model = if model.n_rb() == 3 {
        align_rigid(&model, &rigid_shapes(coords))?
    } else {
        model
    };
    Ok((model, residuals))
}

/// Magnitude/phase table of data and model on the fitted outputs.
pub fn bode_table(frf: &FrfDataset, model: &[crate::CMatrix], rows: &[usize]) -> String {
    let mut out = String::from("freq_hz output input mag_data phase_data mag_model phase_model\n");
    let q = frf.shape().1;
    for (k, om) in frf.omega().iter().enumerate() {
        for &i in rows {
            for j in 0..q {
                let g = frf.response()[k][(i, j)];
                let m = model[k][(i, j)];
                let _ = writeln!(
                    out,
                    "{} {i} {j} {} {} {} {}",
                    fmt_f64(om / (2.0 * PI)),
                    fmt_f64(g.norm()),
                    fmt_f64(g.arg()),
                    fmt_f64(m.norm()),
                    fmt_f64(m.arg())
                );
            }
        }
    }
    out
}

/// Steps 1-5 of the identification: weighting, SK and LM on the LMFD
/// structure for the output subset, conversion to a modal model, modal LM
/// and the linear extension to all outputs. `resume` restarts at a stage
/// from the checkpoints in the output directory.
pub fn cmd_identify(cfg: &PipelineConfig, frf_path: &Path, resume: Option<Stage>) -> Result<IdentifyOutput> {
    cfg.validate()?;
    require_file(frf_path, "FRF file")?;
    let out = &cfg.paths.out;
    ensure_dir(out)?;
    let id = &cfg.identify;
    let raw = FrfDataset::read(frf_path)?;
    let (frf, tau) = prepare_frf(cfg, &raw).map_err(|e| e.in_stage("prepare"))?;
    let (p, q) = frf.shape();
    let coords = cfg.sensor_coords();
    if coords.len() != p {
        return Err(Error::invalid(format!(
            "{} sensor coordinates configured for {p} FRF outputs",
            coords.len()
        )));
    }
    if let Some(&i) = id.subset.iter().find(|&&i| i >= p) {
        return Err(Error::invalid(format!(
            "identify.subset output {i} out of range for {p} outputs"
        )));
    }
    frf.write(&out.join(files::FRF_OPEN))?;
    let cols: Vec<usize> = (0..q).collect();
    let sub = frf.select(&id.subset, &cols)?;
    let sub_coords: Vec<Coord> = id.subset.iter().map(|&i| coords[i]).collect();

    let w_max = match cfg.w_max()? {
        Some(v) => v,
        None => w_max_heuristic(&sub, 2.0 * PI * id.w_max_below_hz).map_err(|e| e.in_stage("weighting"))?,
    };
    let w = weighting_inv_truncated(&sub, w_max).map_err(|e| e.in_stage("weighting"))?;
    let st = build_structure(id.subset.len(), q, id.n_m, id.n_rb).map_err(|e| e.in_stage("sk"))?;
    let ck = Checkpoints { dir: out, resume };
    let mut statuses = Vec::new();
    let mut trace: Vec<TraceEntry> = Vec::new();

    // step 2: SK
    let sk_model = if ck.reuse(Stage::Sk) {
        let (s, t) = ck.load(Stage::Sk)?;
        statuses.push(s);
        trace.extend(t);
        LmfdModel::read(&ck.artifact(files::LMFD_SK, Stage::Sk)?)?
    } else {
        let opts = SkOptions {
            iterations: id.i_sk,
            ..SkOptions::default()
        };
        let (m, rep) = sk_solve(&st, &sub, &w, None, &opts).map_err(|e| e.in_stage("sk"))?;
        let status = StageStatus::from_report(Stage::Sk, &rep);
        m.write(&out.join(files::LMFD_SK))?;
        ck.save(Stage::Sk, &status, &rep.trace)?;
        log::info!(
            "sk: {} after {} iterations, V = {:.6e}",
            status.termination,
            rep.iterations,
            status.final_cost
        );
        statuses.push(status);
        trace.extend(rep.trace);
        m
    };

    // step 3: LM on the LMFD parameters
    let lm_model = if ck.reuse(Stage::Lm) {
        let (s, t) = ck.load(Stage::Lm)?;
        statuses.push(s);
        trace.extend(t);
        LmfdModel::read(&ck.artifact(files::LMFD_LM, Stage::Lm)?)?
    } else {
        let opts = LmOptions {
            max_iter: id.i_gn,
            stage: Stage::Lm.as_str().into(),
            ..LmOptions::default()
        };
        let (theta, rep) =
            lm_refine(&LmfdParam::new(&sk_model), sk_model.theta(), &sub, &w, &opts).map_err(|e| e.in_stage("lm"))?;
        let m = sk_model.with_theta(theta)?;
        let status = StageStatus::from_report(Stage::Lm, &rep);
        m.write(&out.join(files::LMFD_LM))?;
        ck.save(Stage::Lm, &status, &rep.trace)?;
        log::info!(
            "lm: {} after {} steps, V = {:.6e}",
            status.termination,
            rep.iterations,
            status.final_cost
        );
        statuses.push(status);
        trace.extend(rep.trace);
        m
    };

    // step 4: LMFD -> modal
    let transformed = if ck.reuse(Stage::Transform) {
        let (s, t) = ck.load(Stage::Transform)?;
        statuses.push(s);
        trace.extend(t);
        ModelFile::read(&ck.artifact(files::TRANSFORM, Stage::Transform)?)?.model
    } else {
        let tr = lmfd_to_modal(&lm_model, &sub, &w, &sub_coords, id.rho_keep).map_err(|e| e.in_stage("transform"))?;
        write_file(&out.join(files::PRUNING), &prune_table_text(&tr.pruning))?;
        ModelFile::new(tr.model.clone()).write(&out.join(files::TRANSFORM))?;
        let v_lm = statuses.last().map_or(f64::NAN, |s| s.final_cost);
        let status = StageStatus::linear(Stage::Transform, v_lm, tr.modal_cost, tr.warnings.clone());
        ck.save(Stage::Transform, &status, &[])?;
        log::info!(
            "transform: {} of {} pole pairs retained, V = {:.6e} (rank-1 delta {:.3e})",
            tr.model.n_modes(),
            tr.pruning.table.len(),
            tr.modal_cost,
            tr.delta
        );
        statuses.push(status);
        tr.model
    };

    // step 5a: modal LM on the subset
    let modal = if ck.reuse(Stage::ModalLm) {
        let (s, t) = ck.load(Stage::ModalLm)?;
        statuses.push(s);
        trace.extend(t);
        ModelFile::read(&ck.artifact(files::MODAL_SUBSET, Stage::ModalLm)?)?.model
    } else {
        let (m, rep) = modal_refine(&transformed, &sub, &w, id.i_gn_mod).map_err(|e| e.in_stage("modal-lm"))?;
        let status = StageStatus::from_report(Stage::ModalLm, &rep);
        ModelFile::new(m.clone()).write(&out.join(files::MODAL_SUBSET))?;
        ck.save(Stage::ModalLm, &status, &rep.trace)?;
        log::info!(
            "modal-lm: {} after {} steps, V = {:.6e}",
            status.termination,
            rep.iterations,
            status.final_cost
        );
        statuses.push(status);
        trace.extend(rep.trace);
        m
    };

    // step 5b: remaining outputs
    let w_full = weighting_inv_truncated(&frf, w_max).map_err(|e| e.in_stage("extend"))?;
    let (model, residuals) =
        extend_to_all(&modal, &frf, &w_full, &id.subset, &coords).map_err(|e| e.in_stage("extend"))?;
    let response = model.frf(frf.omega()).map_err(|e| e.in_stage("extend"))?;
    let full_cost = cost_of_responses(&frf, &w_full, &response);
    let status = StageStatus::linear(Stage::Extend, f64::NAN, full_cost, Vec::new());
    ck.save(Stage::Extend, &status, &[])?;
    statuses.push(status);
    ModelFile::new(model.clone()).write(&out.join(files::MODEL))?;
    write_file(&out.join(files::BODE), &bode_table(&frf, &response, &id.subset))?;
    write_file(&out.join(files::TRACE), &trace_to_text(&trace))?;

    let checks = check_trace(&trace, id.handoff_bound);
    if checks.sk_oscillation {
        log::info!("SK trace is not monotone");
    }
    let summary = Summary {
        tau,
        w_max,
        subset: id.subset.clone(),
        n_m_lmfd: id.n_m,
        n_m_modal: model.n_modes(),
        stages: statuses,
        checks,
        full_cost,
        extension_residuals: residuals,
        frequencies_hz: model.natural_frequencies().iter().map(|w| w / (2.0 * PI)).collect(),
        damping_ratios: model.damping_ratios(),
    };
    let text = toml::to_string(&summary).map_err(|e| Error::invalid(e.to_string()))?;
    write_file(&out.join(files::SUMMARY), &text)?;
    Ok(IdentifyOutput { model, summary, trace })
}

/// Smoothed thin-plate-spline surfaces for every mode shape of the model;
/// writes the position-dependent model file, one grid file per mode and
/// the cross-validation curves.
pub fn cmd_interp(cfg: &PipelineConfig, model_path: &Path) -> Result<ModelFile> {
    cfg.validate()?;
    require_file(model_path, "model file")?;
    let out = &cfg.paths.out;
    ensure_dir(out)?;
    let mf = ModelFile::read(model_path)?;
    let m = &mf.model;
    let grid = if cfg.interp.lambda_grid.is_empty() {
        default_lambda_grid()
    } else {
        cfg.interp.lambda_grid.clone()
    };
    let surfaces =
        interpolate_mode_shapes(m.mode_shapes(), m.sensor_coords(), &grid).map_err(|e| e.in_stage("interp"))?;
    let domain = cfg.domain();
    let gdir = out.join(files::GRIDS);
    ensure_dir(&gdir)?;
    let mut loocv = String::from("mode lambda loocv_error\n");
    for (i, s) in surfaces.iter().enumerate() {
        let label = format!("mode {} ({:.3} Hz)", i + 1, m.natural_frequencies()[i] / (2.0 * PI));
        write_file(
            &gdir.join(format!("mode_{:02}.txt", i + 1)),
            &export_grid(s, domain, cfg.interp.grid_points, &label),
        )?;
        let _ = writeln!(
            loocv,
            "{} {} {}",
            i + 1,
            fmt_f64(s.lambda()),
            s.loocv_error().map_or("nan".into(), fmt_f64)
        );
    }
    write_file(&out.join(files::LOOCV), &loocv)?;
    let pd = ModelFile {
        model: m.clone(),
        domain: Some(domain),
        surfaces,
    };
    pd.write(&out.join(files::MODEL_PD))?;
    Ok(pd)
}

/// Trajectory samples `(t, rho)`.
pub fn read_trajectory(path: &Path) -> Result<Vec<(f64, Coord)>> {
    require_file(path, "trajectory file")?;
    parse_trajectory(&std::fs::read_to_string(path)?)
}

/// Columnar `t rho_x rho_y`; `#` comments and one header line allowed.
pub fn parse_trajectory(text: &str) -> Result<Vec<(f64, Coord)>> {
    let mut out = Vec::new();
    let mut header_seen = false;
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        if !header_seen && toks.first().is_some_and(|t| t.parse::<f64>().is_err()) {
            header_seen = true;
            if toks != ["t", "rho_x", "rho_y"] {
                return Err(Error::Parse(format!("line {}: expected header `t rho_x rho_y`", n + 1)));
            }
            continue;
        }
        header_seen = true;
        if toks.len() != 3 {
            return Err(Error::Parse(format!("line {}: expected 3 columns", n + 1)));
        }
        let v: Vec<f64> = toks.iter().map(|t| parse_finite(t, n + 1)).collect::<Result<_>>()?;
        out.push((v[0], [v[1], v[2]]));
    }
    Ok(out)
}

pub fn trajectory_text(samples: &[(f64, Coord)]) -> String {
    let mut out = String::from("t rho_x rho_y\n");
    for (t, r) in samples {
        let _ = writeln!(out, "{} {} {}", fmt_f64(*t), fmt_f64(r[0]), fmt_f64(r[1]));
    }
    out
}

#[derive(Debug, Clone)]
pub struct EvalOutput {
    /// Per sample and offset: `(t, output, point, shape row)`.
    pub shapes: Vec<(f64, usize, Coord, Vec<f64>)>,
    pub extrapolated: usize,
}

/// Evaluates the position-dependent model along a trajectory: the
/// interpolated mode-shape row at every point of interest and its FRF on
/// the configured frequencies.
pub fn cmd_eval(cfg: &PipelineConfig, model_path: &Path, trajectory: &Path) -> Result<EvalOutput> {
    cfg.validate()?;
    require_file(model_path, "model file")?;
    let out = &cfg.paths.out;
    ensure_dir(out)?;
    let samples = read_trajectory(trajectory)?;
    let mf = ModelFile::read(model_path)?;
    if mf.surfaces.is_empty() {
        return Err(Error::invalid(format!(
            "{} has no mode-shape surfaces; run interp first",
            model_path.display()
        )));
    }
    let pdm = mf.position_dependent()?;
    let map = ScheduleMap::new(cfg.eval.offsets.clone());
    let rho: Vec<Coord> = samples.iter().map(|s| s.1).collect();
    let paths = map.apply(&rho);
    let omega: Vec<f64> = cfg.eval.frequencies_hz.iter().map(|f| 2.0 * PI * f).collect();
    let mut shapes_txt = String::from("t output x y in_domain");
    for i in 0..pdm.n_modes() {
        let _ = write!(shapes_txt, " L{}", i + 1);
    }
    shapes_txt.push('\n');
    let mut frf_txt = String::from("t output freq_hz input re im\n");
    let mut shapes = Vec::new();
    let mut extrapolated = 0;
    for (k, (t, _)) in samples.iter().enumerate() {
        for (o, path) in paths.iter().enumerate() {
            let pt = path[k];
            let inside = pdm.in_domain(pt);
            if !inside {
                extrapolated += 1;
            }
            let row = pdm.shape_row(pt);
            let _ = write!(
                shapes_txt,
                "{} {o} {} {} {}",
                fmt_f64(*t),
                fmt_f64(pt[0]),
                fmt_f64(pt[1]),
                u8::from(inside)
            );
            for v in &row {
                let _ = write!(shapes_txt, " {}", fmt_f64(*v));
            }
            shapes_txt.push('\n');
            if !omega.is_empty() {
                let g = pdm.eval_at_position(pt, &omega)?;
                for (f, gk) in cfg.eval.frequencies_hz.iter().zip(&g) {
                    for j in 0..gk.ncols() {
                        let z: C64 = gk[(0, j)];
                        let _ = writeln!(
                            frf_txt,
                            "{} {o} {} {j} {} {}",
                            fmt_f64(*t),
                            fmt_f64(*f),
                            fmt_f64(z.re),
                            fmt_f64(z.im)
                        );
                    }
                }
            }
            shapes.push((*t, o, pt, row));
        }
    }
    if extrapolated > 0 {
        log::warn!("{extrapolated} trajectory points lie outside the model domain");
    }
    write_file(&out.join(files::SHAPES), &shapes_txt)?;
    write_file(&out.join(files::EVAL_FRF), &frf_txt)?;
    Ok(EvalOutput { shapes, extrapolated })
}

/// Outcome of [`run`]: the identification result if that stage ran.
#[derive(Debug, Clone, Default)]
pub struct RunOutput {
    pub identify: Option<IdentifyOutput>,
}

/// Runs the enabled stages in order.
pub fn run(cfg: &PipelineConfig, resume: Option<Stage>) -> Result<RunOutput> {
    cfg.validate()?;
    let mut res = RunOutput::default();
    if cfg.stages.synth {
        cmd_synth(cfg)?;
    }
    if cfg.stages.identify {
        res.identify = Some(cmd_identify(cfg, &cfg.frf_path(), resume)?);
    }
    let model = cfg
        .paths
        .model
        .clone()
        .unwrap_or_else(|| cfg.paths.out.join(files::MODEL));
    if cfg.stages.interp {
        cmd_interp(cfg, &model)?;
    }
    if cfg.stages.eval {
        let traj = cfg
            .paths
            .trajectory
            .clone()
            .ok_or_else(|| Error::invalid("stage eval needs paths.trajectory"))?;
        let pd = if cfg.stages.interp {
            cfg.paths.out.join(files::MODEL_PD)
        } else {
            model
        };
        cmd_eval(cfg, &pd, &traj)?;
    }
    Ok(res)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips() {
        let cfg = PipelineConfig::default();
        cfg.validate().unwrap();
        let back = PipelineConfig::from_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn keywords_and_numbers_parse() {
        let cfg =
            PipelineConfig::from_text("[identify]\ndelay = 1e-4\nw_max = 50.0\n[plate]\nsnr_db = \"none\"\n").unwrap();
        assert_eq!(cfg.delay_rule().unwrap(), DelayRule::Fixed(1e-4));
        assert_eq!(cfg.w_max().unwrap(), Some(50.0));
        assert_eq!(cfg.snr_db().unwrap(), None);
        let cfg = PipelineConfig::from_text("[identify]\ndelay = \"estimate\"\n").unwrap();
        assert_eq!(cfg.delay_rule().unwrap(), DelayRule::Estimate);
    }

    #[test]
    fn invalid_values_are_rejected() {
        for text in [
            "[identify]\ndelay = \"soon\"\n",
            "[identify]\nw_max = -1.0\n",
            "[identify]\nsubset = [1, 1]\n",
            "[experiment]\nbin_spacing_hz = 0.3\n",
            "[experiment]\nf_max_hz = 5000.0\n",
            "[plate]\nn_flex = 10\n",
            "[identify]\nunknown = 1\n",
        ] {
            assert!(PipelineConfig::from_text(text).is_err(), "{text}");
        }
    }

    #[test]
    fn multisine_follows_the_experiment() {
        let ms = PipelineConfig::default().multisine();
        assert_eq!(ms.period_len, 16384);
        assert_eq!(ms.bins.len(), 2000);
        assert_eq!(*ms.bins.last().unwrap(), 2000);
    }

    #[test]
    fn stage_names_round_trip() {
        for s in Stage::ALL {
            assert_eq!(Stage::parse(s.as_str()).unwrap(), s);
        }
        assert!(Stage::parse("weighting").is_err());
    }

    #[test]
    fn trajectory_parsing() {
        let s = vec![(0.0, [0.1, -0.2]), (0.5, [0.0, 0.0])];
        assert_eq!(parse_trajectory(&trajectory_text(&s)).unwrap(), s);
        assert!(parse_trajectory("t rho_x rho_y\n").unwrap().is_empty());
        assert!(parse_trajectory("0 1\n").is_err());
        assert!(parse_trajectory("0 1 nan\n").is_err());
    }

    fn entry(stage: &str, cost: f64, accepted: bool) -> TraceEntry {
        TraceEntry {
            iteration: 0,
            stage: stage.into(),
            cost,
            mu: 0.0,
            accepted,
        }
    }

    #[test]
    fn trace_checks() {
        let t = vec![
            entry("sk", 10.0, true),
            entry("sk", 12.0, true),
            entry("sk", 5.0, true),
            entry("lm", 5.0, true),
            entry("lm", 7.0, false),
            entry("lm", 4.0, true),
            entry("modal-lm", 4.4, true),
            entry("modal-lm", 4.2, true),
        ];
        let c = check_trace(&t, 1.0);
        assert!(c.sk_oscillation && c.lm_monotone && c.handoff_bounded && c.ok());
        assert!((c.handoff_increase - 0.1).abs() < 1e-12);
        assert!((c.modal_decrease - 0.2).abs() < 1e-12);
        let c = check_trace(&t, 0.05);
        assert!(!c.handoff_bounded && !c.ok());
        let mut bad = t.clone();
        bad[5].cost = 6.0;
        assert!(!check_trace(&bad, 1.0).lm_monotone);
    }
}
