//! Source pre-training and the alternating adaptation loop, with run
//! ledgers and resumable checkpoints.
//!
//! Each adaptation step: pseudo-labels from the teacher, deformation of the
//! pinhole sample, class-mix and augmentation, then updates of the student,
//! the deformation network, the active discriminator and finally the
//! teacher, in that order.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::{parse_config, validate_config, TrainConfig};
use crate::datamodel::{DomainSet, LabelMap, LabeledImage};
use crate::deformation::smoothness_penalty;
use crate::dga::{
    augment, class_mix, cross_entropy, seg_loss_total, uncertainty_alignment, AugmentConfig, AugmentRole, Sample,
    TeacherState,
};
use crate::error::{Error, Result};
use crate::nn::{Adam, Module, Optimizer, RmsProp, Sgd};
use crate::segnet::{SegConfig, SegModel};
use crate::synthdata::rng_for;
use crate::tensor::Tensor;
use crate::usm::{
    adversarial_losses, cycle_losses, discriminator_losses, structure_view, morph_forward, morph_loss_total,
    DualViewDiscriminator, DeformationNetwork, MorphLossReport, MorphParts, Pairing,
};

const INIT_STUDENT: u64 = 101;
const INIT_MORPH: u64 = 102;
const PRETRAIN_STEP: u64 = 103;
const ADAPT_STEP: u64 = 104;

/// One row of the run ledger.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LedgerRow {
    pub iteration: usize,
    pub pairing: String,
    pub skipped: bool,
    pub l_pin: f64,
    pub l_pan: f64,
    pub l_t: f64,
    pub d_kl: f64,
    pub coverage: f64,
    pub l_dis_img: f64,
    pub l_dis_pix: f64,
    pub l_adv_img: f64,
    pub l_adv_pix: f64,
    pub l_recon: f64,
    pub l_sem: f64,
    pub l_smooth: f64,
    pub l_morph_total: f64,
    pub ramp: f64,
    /// Largest displacement of the pinhole-to-panoramic field, in pixels.
    pub phi_max: f64,
}

pub const LEDGER_COLUMNS: [&str; 18] = [
    "iteration",
    "pairing",
    "skipped",
    "l_pin",
    "l_pan",
    "l_t",
    "d_kl",
    "coverage",
    "l_dis_img",
    "l_dis_pix",
    "l_adv_img",
    "l_adv_pix",
    "l_recon",
    "l_sem",
    "l_smooth",
    "l_morph_total",
    "ramp",
    "phi_max",
];

fn rows_to_csv(rows: &[LedgerRow]) -> Result<String> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Checkpoint(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn rows_from_csv(text: &str) -> Result<Vec<LedgerRow>> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Header of a ledger file: the resolved configuration as `#` comments,
/// followed by the column names.
fn ledger_header(cfg: &TrainConfig) -> String {
    let mut s: String = cfg.to_text().lines().map(|l| format!("# {l}\n")).collect();
    s.push_str(&LEDGER_COLUMNS.join(","));
    s.push('\n');
    s
}

/// Writes a ledger file containing `rows`.
pub fn write_ledger(path: &Path, cfg: &TrainConfig, rows: &[LedgerRow]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let text = ledger_header(cfg) + &rows_to_csv(rows)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn append_ledger(path: &Path, row: &LedgerRow) -> Result<()> {
    let mut f = OpenOptions::new().append(true).open(path).map_err(|e| Error::io(path, e))?;
    f.write_all(rows_to_csv(std::slice::from_ref(row))?.as_bytes())
        .map_err(|e| Error::io(path, e))
}

pub fn read_ledger(path: &Path) -> Result<Vec<LedgerRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let body: String = text
        .lines()
        .filter(|l| !l.starts_with('#') && !l.starts_with(LEDGER_COLUMNS[0]))
        .map(|l| format!("{l}\n"))
        .collect();
    rows_from_csv(&body)
}

fn step_rng(seed: u64, stream: u64, iteration: usize) -> ChaCha8Rng {
    rng_for(seed, stream, iteration)
}

fn pick<'a>(domains: &'a [Vec<LabeledImage>], rng: &mut impl Rng) -> &'a LabeledImage {
    let d = &domains[rng.random_range(0..domains.len())];
    &d[rng.random_range(0..d.len())]
}

fn require_labels(img: &LabeledImage) -> Result<&LabelMap> {
    img.labels
        .as_ref()
        .ok_or_else(|| Error::validation(format!("{} image {} has no labels", img.domain, img.id)))
}

fn check_sources(data: &DomainSet) -> Result<()> {
    if data.pin_domains.iter().all(Vec::is_empty) {
        return Err(Error::validation("no pinhole source images"));
    }
    if data.pan_domains.iter().all(Vec::is_empty) {
        return Err(Error::validation("no panoramic source images"));
    }
    if data.pin_domains.iter().chain(&data.pan_domains).any(Vec::is_empty) {
        return Err(Error::validation("a source domain is empty"));
    }
    Ok(())
}

fn student_step(student: &mut SegModel, opt: &mut Sgd, loss: &Tensor) {
    let grads = loss.backward();
    opt.step(student.named_params_mut(), &grads);
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub student: SegModel,
    pub teacher: TeacherState,
    /// Total loss per iteration.
    pub losses: Vec<f64>,
    pub warning: Option<String>,
}

/// Trains the student on the labelled sources only: the pinhole head on
/// pinhole images, the panoramic head on panoramic images, and the fused
/// head on pinhole objects pasted into panoramic images.
pub fn source_pretrain(cfg: &TrainConfig, data: &DomainSet) -> Result<PretrainOutcome> {
    check_sources(data)?;
    let mut student = SegModel::new(SegConfig::from_train(cfg), &mut rng_for(cfg.seed, INIT_STUDENT, 0))?;
    let aug = AugmentConfig::from_train(cfg);
    let mut opt = Sgd::new(cfg.lr_s, cfg.momentum_s, cfg.wd_s);
    let mut losses = Vec::with_capacity(cfg.pretrain_its);
    let warning = (cfg.pretrain_its == 0).then(|| {
        let msg = "pre-training ran zero iterations; the student is randomly initialized".to_string();
        log::warn!("{msg}");
        msg
    });
    for it in 0..cfg.pretrain_its {
        let mut rng = step_rng(cfg.seed, PRETRAIN_STEP, it);
        let pin = pick(&data.pin_domains, &mut rng);
        let pan = pick(&data.pan_domains, &mut rng);
        let (pin_labels, pan_labels) = (require_labels(pin)?, require_labels(pan)?);
        let mix = class_mix(&pin.pixels, pin_labels, &pan.pixels, pan_labels, &mut rng)?;
        let mut samples = [
            Sample {
                image: pin.pixels.clone(),
                labels: Some(pin_labels.clone()),
            },
            Sample {
                image: pan.pixels.clone(),
                labels: Some(pan_labels.clone()),
            },
            Sample {
                image: mix.image,
                labels: Some(mix.labels),
            },
        ];
        for s in &mut samples {
            augment(s, &aug, AugmentRole::Source, None, &mut rng);
        }
        let label = |i: usize| samples[i].labels.as_ref().expect("source samples are labelled");
        let out_pin = student.forward_full(&samples[0].image.to_tensor())?;
        let out_pan = student.forward_full(&samples[1].image.to_tensor())?;
        let out_mix = student.forward_full(&samples[2].image.to_tensor())?;
        let l_pin = cross_entropy(&out_pin.logits_pin, &[label(0)], "pinhole source")?;
        let l_pan = cross_entropy(&out_pan.logits_pan, &[label(1)], "panoramic source")?;
        let l_t = uncertainty_alignment(&out_mix, &[label(2)])?.l_t;
        let total = seg_loss_total(&l_pin, &l_pan, &l_t, cfg.beta)?;
        let value = total.item();
        losses.push(value);
        if !value.is_finite() {
            if cfg.skip_nonfinite {
                log::warn!("pre-training iteration {it}: non-finite loss, update skipped");
                continue;
            }
            return Err(Error::NonFinite(format!("pre-training iteration {it}")));
        }
        student_step(&mut student, &mut opt, &total);
        if it % 50 == 0 {
            log::debug!("pretrain it {it}: loss {value:.4}");
        }
    }
    let teacher = TeacherState::from_student(&student, cfg.gamma);
    Ok(PretrainOutcome {
        student,
        teacher,
        losses,
        warning,
    })
}

/// Sub-steps of one adaptation iteration, in execution order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    PseudoLabels,
    Deformation,
    MixAugment,
    StudentUpdate,
    DeformationUpdate,
    DiscriminatorUpdate,
    TeacherUpdate,
}

#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub row: LedgerRow,
    pub phases: Vec<Phase>,
}

/// Everything that evolves during adaptation.
#[derive(Clone, Debug)]
pub struct RunState {
    pub cfg: TrainConfig,
    pub iteration: usize,
    pub student: SegModel,
    pub teacher: TeacherState,
    pub deform: DeformationNetwork,
    /// Indexed like [`Pairing::ALL`].
    pub discs: Vec<DualViewDiscriminator>,
    pub opt_s: Sgd,
    pub opt_f: Adam,
    pub opt_d: Vec<RmsProp>,
    pub ledger: Vec<LedgerRow>,
}

fn pairing_index(p: Pairing) -> usize {
    Pairing::ALL.iter().position(|&q| q == p).expect("known pairing")
}

impl RunState {
    /// Fresh adaptation state; the teacher starts as a copy of `student`.
    pub fn new(cfg: TrainConfig, student: SegModel) -> RunState {
        let mut rng = rng_for(cfg.seed, INIT_MORPH, 0);
        let deform = DeformationNetwork::new(cfg.deform_width, &mut rng).with_bound(cfg.max_velocity);
        let discs = Pairing::ALL
            .iter()
            .map(|_| DualViewDiscriminator::new(cfg.disc_width, &mut rng))
            .collect();
        RunState {
            teacher: TeacherState::from_student(&student, cfg.gamma),
            student,
            deform,
            discs,
            opt_s: Sgd::new(cfg.lr_s, cfg.momentum_s, cfg.wd_s),
            opt_f: Adam::new(cfg.lr_f, cfg.wd_f),
            opt_d: Pairing::ALL.iter().map(|_| RmsProp::new(cfg.lr_d, cfg.wd_d)).collect(),
            iteration: 0,
            ledger: Vec::new(),
            cfg,
        }
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new();
        ck.set_meta("kind", "run");
        ck.set_meta("iteration", self.iteration);
        ck.set_meta("config", self.cfg.to_text());
        ck.set_meta("ledger", rows_to_csv(&self.ledger)?);
        put_seg_config(&mut ck, &self.student.config);
        ck.insert_module("student", &self.student);
        ck.insert_module("teacher", &self.teacher.model);
        ck.insert_module("deform", &self.deform);
        ck.insert_optimizer("opt/student", &self.opt_s.state());
        ck.insert_optimizer("opt/deform", &self.opt_f.state());
        for (i, p) in Pairing::ALL.iter().enumerate() {
            ck.insert_module(&format!("disc/{}", p.name()), &self.discs[i]);
            ck.insert_optimizer(&format!("opt/disc/{}", p.name()), &self.opt_d[i].state());
        }
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<RunState> {
        if ck.meta("kind")? != "run" {
            return Err(Error::Checkpoint("not an adaptation checkpoint".into()));
        }
        let cfg = validate_config(parse_config(ck.meta("config")?)?)?;
        let student = SegModel::new(seg_config_from(ck)?, &mut ChaCha8Rng::seed_from_u64(0))?;
        let mut state = RunState::new(cfg, student);
        ck.load_module("student", &mut state.student)?;
        ck.load_module("teacher", &mut state.teacher.model)?;
        ck.load_module("deform", &mut state.deform)?;
        state.opt_s.load_state(ck.optimizer_state("opt/student"));
        state.opt_f.load_state(ck.optimizer_state("opt/deform"));
        for (i, p) in Pairing::ALL.iter().enumerate() {
            ck.load_module(&format!("disc/{}", p.name()), &mut state.discs[i])?;
            state.opt_d[i].load_state(ck.optimizer_state(&format!("opt/disc/{}", p.name())));
        }
        state.iteration = ck.meta_parse("iteration")?;
        state.ledger = rows_from_csv(ck.meta("ledger")?)?;
        if state.ledger.len() != state.iteration {
            return Err(Error::Checkpoint(format!(
                "checkpoint at iteration {} carries {} ledger rows",
                state.iteration,
                state.ledger.len()
            )));
        }
        Ok(state)
    }
}

fn put_seg_config(ck: &mut Checkpoint, c: &SegConfig) {
    ck.set_meta("seg.num_classes", c.num_classes);
    let widths: Vec<String> = c.enc_widths.iter().map(usize::to_string).collect();
    ck.set_meta("seg.enc_widths", widths.join(","));
    ck.set_meta("seg.branch_width", c.branch_width);
    ck.set_meta("seg.gate_width", c.gate_width);
}

fn seg_config_from(ck: &Checkpoint) -> Result<SegConfig> {
    let enc_widths = ck
        .meta("seg.enc_widths")?
        .split(',')
        .map(|w| w.parse().map_err(|_| Error::Checkpoint("malformed seg.enc_widths".into())))
        .collect::<Result<Vec<usize>>>()?;
    Ok(SegConfig {
        num_classes: ck.meta_parse("seg.num_classes")?,
        enc_widths,
        branch_width: ck.meta_parse("seg.branch_width")?,
        gate_width: ck.meta_parse("seg.gate_width")?,
    })
}

/// Stores a segmentation model alone, e.g. the pre-trained student.
pub fn save_student(path: &Path, model: &SegModel, cfg: &TrainConfig) -> Result<()> {
    let mut ck = Checkpoint::new();
    ck.set_meta("kind", "student");
    ck.set_meta("config", cfg.to_text());
    put_seg_config(&mut ck, &model.config);
    ck.insert_module("student", model);
    ck.write(path)
}

/// Reads the student from either a student-only or a run checkpoint.
pub fn load_student(path: &Path) -> Result<SegModel> {
    let ck = Checkpoint::read(path)?;
    let mut model = SegModel::new(seg_config_from(&ck)?, &mut ChaCha8Rng::seed_from_u64(0))?;
    ck.load_module("student", &mut model)?;
    Ok(model)
}

/// Reads the deformation network from a run checkpoint.
pub fn load_deformation(path: &Path) -> Result<DeformationNetwork> {
    let ck = Checkpoint::read(path)?;
    let cfg = validate_config(parse_config(ck.meta("config")?)?)?;
    let mut net = DeformationNetwork::new(cfg.deform_width, &mut ChaCha8Rng::seed_from_u64(0)).with_bound(cfg.max_velocity);
    ck.load_module("deform", &mut net)?;
    Ok(net)
}

/// `base · (1 − it/max)^power`.
pub fn poly_lr(base: f64, it: usize, max_its: usize, power: f64) -> f64 {
    base * (1.0 - it as f64 / max_its as f64).max(0.0).powf(power)
}

fn finite_or_skip(cfg: &TrainConfig, it: usize, what: &str, value: f64) -> Result<bool> {
    if value.is_finite() {
        return Ok(true);
    }
    if cfg.skip_nonfinite {
        log::warn!("iteration {it}: non-finite {what} loss, update skipped");
        Ok(false)
    } else {
        Err(Error::NonFinite(format!("{what} loss at iteration {it}")))
    }
}

/// One adaptation iteration; advances `state.iteration` by one.
pub fn adapt_step(state: &mut RunState, data: &DomainSet) -> Result<StepOutcome> {
    check_sources(data)?;
    if data.target.is_empty() {
        return Err(Error::validation("target domain empty"));
    }
    let cfg = state.cfg.clone();
    let it = state.iteration;
    if it >= cfg.max_its {
        return Err(Error::validation(format!("iteration {it} is past max_its {}", cfg.max_its)));
    }
    let mut rng = step_rng(cfg.seed, ADAPT_STEP, it);
    let mut phases = Vec::with_capacity(7);
    let mut row = LedgerRow {
        iteration: it,
        ..LedgerRow::default()
    };

    let x_i = pick(&data.pin_domains, &mut rng);
    let v = pick(&data.pan_domains, &mut rng);
    let t = &data.target[rng.random_range(0..data.target.len())];
    let (y_i, y_v) = (require_labels(x_i)?, require_labels(v)?);

    let pseudo = state.teacher.pseudo_labels(&t.pixels.to_tensor(), cfg.eta)?.remove(0);
    row.coverage = pseudo.coverage();
    phases.push(Phase::PseudoLabels);

    let pairing = Pairing::ALL[rng.random_range(0..Pairing::ALL.len())];
    row.pairing = pairing.name().to_string();
    let x_a = match pairing {
        Pairing::SourcePanoramic => v,
        Pairing::TargetPanoramic => t,
    };
    let morph = if cfg.usm {
        let m = morph_forward(&state.deform, x_i, x_a, cfg.integration_steps)?;
        row.phi_max = m.phi_i2a.max_magnitude();
        Some(m)
    } else {
        None
    };
    phases.push(Phase::Deformation);

    let deformed = match &morph {
        Some(m) => Sample {
            image: crate::datamodel::RgbImage::from_tensor(&m.x_i2a)?,
            labels: m.y_i2a.clone(),
        },
        None => Sample {
            image: x_i.pixels.clone(),
            labels: Some(y_i.clone()),
        },
    };
    let mix = if rng.random_bool(0.5) {
        class_mix(
            &deformed.image,
            deformed.labels.as_ref().expect("pinhole labels"),
            &t.pixels,
            &pseudo.labels,
            &mut rng,
        )?
    } else {
        class_mix(&v.pixels, y_v, &t.pixels, &pseudo.labels, &mut rng)?
    };
    let aug = AugmentConfig::from_train(&cfg);
    let mut samples = [
        deformed,
        Sample {
            image: v.pixels.clone(),
            labels: Some(y_v.clone()),
        },
        Sample {
            image: mix.image,
            labels: Some(mix.labels),
        },
        Sample {
            image: t.pixels.clone(),
            labels: Some(pseudo.labels),
        },
    ];
    for (k, s) in samples.iter_mut().enumerate() {
        match k {
            0 | 1 => augment(s, &aug, AugmentRole::Source, Some(&t.pixels), &mut rng),
            2 => augment(s, &aug, AugmentRole::Source, None, &mut rng),
            _ => augment(s, &aug, AugmentRole::Target, None, &mut rng),
        }
    }
    phases.push(Phase::MixAugment);

    let label = |k: usize| samples[k].labels.as_ref().expect("every sample is labelled");
    let outs = samples
        .iter()
        .map(|s| state.student.forward_full(&s.image.to_tensor()))
        .collect::<Result<Vec<_>>>()?;
    let l_pin = cross_entropy(&outs[0].logits_pin, &[label(0)], "deformed pinhole")?;
    let l_pan = cross_entropy(&outs[1].logits_pan, &[label(1)], "panoramic source")?;
    let a_mix = uncertainty_alignment(&outs[2], &[label(2)])?;
    let a_tgt = uncertainty_alignment(&outs[3], &[label(3)])?;
    let l_t = a_mix.l_t.add(&a_tgt.l_t);
    let total = seg_loss_total(&l_pin, &l_pan, &l_t, cfg.beta)?;
    row.l_pin = l_pin.item();
    row.l_pan = l_pan.item();
    row.l_t = l_t.item();
    row.d_kl = (a_mix.d_kl + a_tgt.d_kl) / 2.0;
    if finite_or_skip(&cfg, it, "segmentation", total.item())? {
        state.opt_s.set_lr(poly_lr(cfg.lr_s, it, cfg.max_its, cfg.lr_power));
        student_step(&mut state.student, &mut state.opt_s, &total);
    } else {
        row.skipped = true;
    }
    drop(outs);
    phases.push(Phase::StudentUpdate);

    if let Some(m) = &morph {
        let di = pairing_index(pairing);
        let x_i_t = x_i.pixels.to_tensor();
        let x_a_t = x_a.pixels.to_tensor();
        let fake = structure_view(&m.x_i2a);
        let adv = adversarial_losses(&state.discs[di], &fake);
        let cyc = cycle_losses(&x_i_t, &x_a_t, &m.phi_i2a, &m.phi_a2i, &state.teacher.model)?;
        let parts = MorphParts {
            adv_img: adv.img,
            adv_pix: adv.pix,
            recon: cyc.recon,
            sem: cyc.sem,
            smooth: smoothness_penalty(&m.phi_i2a),
        };
        let (morph_total, report) = morph_loss_total(&parts, cfg.alpha, it, cfg.max_its)?;
        if finite_or_skip(&cfg, it, "morphing", report.l_morph_total)? {
            let grads = morph_total.backward();
            state.opt_f.step(state.deform.named_params_mut(), &grads);
        } else {
            row.skipped = true;
        }
        phases.push(Phase::DeformationUpdate);

        let dis = discriminator_losses(&state.discs[di], &fake, &structure_view(&x_a_t));
        let dis_total = dis.img.add(&dis.pix);
        let MorphLossReport {
            l_adv_img,
            l_adv_pix,
            l_recon,
            l_sem,
            l_smooth,
            l_morph_total,
            ramp,
            ..
        } = report;
        row.l_dis_img = dis.img.item();
        row.l_dis_pix = dis.pix.item();
        row.l_adv_img = l_adv_img;
        row.l_adv_pix = l_adv_pix;
        row.l_recon = l_recon;
        row.l_sem = l_sem;
        row.l_smooth = l_smooth;
        row.l_morph_total = l_morph_total;
        row.ramp = ramp;
        if finite_or_skip(&cfg, it, "discriminator", dis_total.item())? {
            let grads = dis_total.backward();
            state.opt_d[di].step(state.discs[di].named_params_mut(), &grads);
        } else {
            row.skipped = true;
        }
        phases.push(Phase::DiscriminatorUpdate);
    }

    state.teacher.ema_update(&state.student)?;
    phases.push(Phase::TeacherUpdate);
    state.iteration += 1;
    state.ledger.push(row.clone());
    Ok(StepOutcome { row, phases })
}

/// Paths written by [`run_adaptation`] under its output directory.
pub fn ledger_path(out_dir: &Path) -> PathBuf {
    out_dir.join("ledger.csv")
}

pub fn checkpoint_path(out_dir: &Path, iteration: usize) -> PathBuf {
    out_dir.join("checkpoints").join(format!("ckpt_{iteration:06}.pmck"))
}

pub fn final_checkpoint_path(out_dir: &Path) -> PathBuf {
    out_dir.join("final.pmck")
}

/// Runs adaptation steps until `until` (capped at `max_its`). With an
/// output directory, the ledger is rewritten from `state.ledger` and every
/// step is appended to it; checkpoints are written every
/// `checkpoint_interval` steps and when the loop stops, as `final.pmck` if
/// it reached `max_its`. A failed periodic checkpoint is logged and only
/// the closing write is fatal.
pub fn run_adaptation_until(state: &mut RunState, data: &DomainSet, out_dir: Option<&Path>, until: usize) -> Result<()> {
    let until = until.min(state.cfg.max_its);
    let interval = state.cfg.checkpoint_interval();
    if let Some(out) = out_dir {
        write_ledger(&ledger_path(out), &state.cfg, &state.ledger)?;
    }
    let mut last_written = None;
    while state.iteration < until {
        let outcome = adapt_step(state, data)?;
        if let Some(out) = out_dir {
            append_ledger(&ledger_path(out), &outcome.row)?;
            if state.iteration % interval == 0 {
                let path = checkpoint_path(out, state.iteration);
                match state.to_checkpoint()?.write(&path) {
                    Ok(()) => last_written = Some(state.iteration),
                    Err(e) => log::error!("checkpoint {} failed: {e}", path.display()),
                }
            }
        }
        if state.iteration % 50 == 0 {
            let r = &outcome.row;
            log::info!(
                "it {}: l_pin {:.3} l_pan {:.3} l_t {:.3} coverage {:.2} adv {:.3}",
                state.iteration,
                r.l_pin,
                r.l_pan,
                r.l_t,
                r.coverage,
                r.l_adv_img + r.l_adv_pix
            );
        }
    }
    if let Some(out) = out_dir {
        let ck = state.to_checkpoint()?;
        if state.iteration == state.cfg.max_its {
            ck.write(&final_checkpoint_path(out))?;
        } else if last_written != Some(state.iteration) {
            ck.write(&checkpoint_path(out, state.iteration))?;
        }
    }
    Ok(())
}

/// Runs the remaining iterations up to `max_its` and returns the student.
pub fn run_adaptation(state: &mut RunState, data: &DomainSet, out_dir: Option<&Path>) -> Result<SegModel> {
    let max = state.cfg.max_its;
    run_adaptation_until(state, data, out_dir, max)?;
    Ok(state.student.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate_benchmark, DomainCounts, SceneSpec};

    fn tiny_cfg() -> TrainConfig {
        let mut cfg = TrainConfig::default();
        cfg.height = 16;
        cfg.width = 32;
        cfg.enc_widths = vec![4, 4, 4, 4];
        cfg.branch_width = 4;
        cfg.gate_width = 4;
        cfg.deform_width = 2;
        cfg.disc_width = 2;
        cfg.max_its = 4;
        cfg.pretrain_its = 2;
        cfg
    }

    fn tiny_data() -> DomainSet {
        generate_benchmark(&SceneSpec::new(1, 5, 16, 32, 0.25), DomainCounts::uniform(3))
            .unwrap()
            .domains
    }

    #[test]
    fn ledger_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ledger.csv");
        let row = LedgerRow {
            iteration: 3,
            pairing: "src_pan".into(),
            l_pin: 0.1 + 0.2,
            ..LedgerRow::default()
        };
        write_ledger(&path, &tiny_cfg(), std::slice::from_ref(&row)).unwrap();
        append_ledger(&path, &row).unwrap();
        assert_eq!(read_ledger(&path).unwrap(), vec![row.clone(), row]);
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.lines().any(|l| l.starts_with("# alpha = ")));
    }

    #[test]
    fn zero_pretraining_warns() {
        let mut cfg = tiny_cfg();
        cfg.pretrain_its = 0;
        let out = source_pretrain(&cfg, &tiny_data()).unwrap();
        assert!(out.warning.is_some());
        assert_eq!(out.teacher.model.param_checksum(), out.student.param_checksum());
    }

    #[test]
    fn step_order_and_counter() {
        let cfg = tiny_cfg();
        let data = tiny_data();
        let pre = source_pretrain(&cfg, &data).unwrap();
        let mut state = RunState::new(cfg, pre.student);
        let out = adapt_step(&mut state, &data).unwrap();
        assert_eq!(
            out.phases,
            vec![
                Phase::PseudoLabels,
                Phase::Deformation,
                Phase::MixAugment,
                Phase::StudentUpdate,
                Phase::DeformationUpdate,
                Phase::DiscriminatorUpdate,
                Phase::TeacherUpdate
            ]
        );
        assert_eq!(state.iteration, 1);
        assert_eq!(state.ledger.len(), 1);
    }

    #[test]
    fn checkpoint_restores_state() {
        let cfg = tiny_cfg();
        let data = tiny_data();
        let pre = source_pretrain(&cfg, &data).unwrap();
        let mut state = RunState::new(cfg, pre.student);
        adapt_step(&mut state, &data).unwrap();
        let back = RunState::from_checkpoint(&Checkpoint::decode(&state.to_checkpoint().unwrap().encode()).unwrap()).unwrap();
        assert_eq!(back.iteration, 1);
        assert_eq!(back.ledger, state.ledger);
        assert_eq!(back.student.param_checksum(), state.student.param_checksum());
        assert_eq!(back.teacher.model.param_checksum(), state.teacher.model.param_checksum());
        assert_eq!(back.deform.param_checksum(), state.deform.param_checksum());
        assert_eq!(back.opt_f.state(), state.opt_f.state());
        assert!(back.teacher.model.named_params().iter().all(|(_, p)| !p.requires_grad()));
    }

    #[test]
    fn missing_sources_rejected() {
        let mut data = tiny_data();
        data.pan_domains[0].clear();
        assert!(source_pretrain(&tiny_cfg(), &data).is_err());
    }
}
