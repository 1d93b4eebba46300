//! Conversion between trained models and [`Checkpoint`] containers.
//!
//! Entry names are prefixed by owner: `teacher.*` for the frozen teacher
//! stage, `student.*` for the online network and its optimizer, `target.*`
//! for the EMA network, `disc.*` for the discriminator head.

use crate::checkpoint::Checkpoint;
use crate::config::KvConfig;
use crate::distill::{head_layout, DistillConfig, DistillRun, DistillState, Discriminator, Student, OMEGA_DIM};
use crate::error::{Error, Result};
use crate::eval::{oracle_layout, OracleClassifier};
use crate::nets::{CondNet, CondNetSpec, NetLayout, NetParams};
use crate::optim::{AdamConfig, AdamW};
use crate::solver::PhasePartition;
use crate::teacher::{decoder_layout, encoder_layout, ReconReport, TeacherBundle, TeacherConfig};

const TEACHER_CFG: &str = "teacher.config.";
const DISTILL_CFG: &str = "distill.config.";

fn parse<T: std::str::FromStr>(ck: &Checkpoint, key: &str) -> Result<T> {
    let v = ck.meta(key)?;
    v.parse()
        .map_err(|_| Error::Invalid(format!("metadata '{key}': cannot parse '{v}'")))
}

fn params(ck: &Checkpoint, name: &str, layout: NetLayout) -> Result<NetParams> {
    let e = ck.require(name)?;
    if e.data.len() != layout.param_count {
        return Err(Error::Invalid(format!(
            "entry '{name}' has {} values, layout needs {}",
            e.data.len(),
            layout.param_count
        )));
    }
    NetParams::from_values(layout, e.data.clone())
}

fn prefixed<C: KvConfig>(ck: &Checkpoint, prefix: &str) -> Result<C> {
    let map = ck
        .metadata
        .iter()
        .filter_map(|(k, v)| k.strip_prefix(prefix).map(|k| (k.to_string(), v.clone())))
        .collect();
    C::from_map(&map)
}

pub fn write_teacher(ck: &mut Checkpoint, b: &TeacherBundle) -> Result<()> {
    ck.set_meta("teacher.seed", b.seed);
    for (k, v) in b.config.pairs() {
        ck.set_meta(format!("{TEACHER_CFG}{k}"), v);
    }
    if let Some(f) = b.gate_fid {
        ck.set_meta("teacher.gate_fid", f);
    }
    ck.set_meta("teacher.recon_mpjpe", b.recon.mpjpe);
    ck.set_meta("teacher.recon_feature_error", b.recon.feature_error);
    ck.set_meta("teacher.oracle_accuracy", b.oracle.heldout_acc);
    ck.push_flat("teacher.encoder", b.encoder.values.clone())?;
    ck.push_flat("teacher.decoder", b.decoder.values.clone())?;
    ck.push_flat("teacher.eps", b.eps_net.params.values.clone())?;
    ck.push_flat("teacher.latent_mean", b.latent_mean.clone())?;
    ck.push_flat("teacher.latent_std", b.latent_std.clone())?;
    ck.push_flat("teacher.oracle", b.oracle.net.values.clone())?;
    ck.push_flat("teacher.oracle_mean", b.oracle.mean.clone())?;
    ck.push_flat("teacher.oracle_std", b.oracle.std.clone())?;
    Ok(())
}

pub fn teacher_checkpoint(b: &TeacherBundle) -> Result<Checkpoint> {
    let mut ck = Checkpoint::default();
    ck.set_meta("kind", "teacher");
    write_teacher(&mut ck, b)?;
    Ok(ck)
}

pub fn read_teacher(ck: &Checkpoint) -> Result<TeacherBundle> {
    let config: TeacherConfig = prefixed(ck, TEACHER_CFG)?;
    let spec = CondNetSpec::teacher(config.autoencoder.latent_dim, config.classes);
    let eps_net = CondNet::from_params(spec, params(ck, "teacher.eps", spec.layout())?)?;
    let oracle = OracleClassifier {
        net: params(ck, "teacher.oracle", oracle_layout(config.classes))?,
        mean: ck.require("teacher.oracle_mean")?.data.clone(),
        std: ck.require("teacher.oracle_std")?.data.clone(),
        heldout_acc: parse(ck, "teacher.oracle_accuracy")?,
    };
    Ok(TeacherBundle {
        seed: parse(ck, "teacher.seed")?,
        encoder: params(ck, "teacher.encoder", encoder_layout(&config.autoencoder))?,
        decoder: params(ck, "teacher.decoder", decoder_layout(&config.autoencoder))?,
        latent_mean: ck.require("teacher.latent_mean")?.data.clone(),
        latent_std: ck.require("teacher.latent_std")?.data.clone(),
        eps_net,
        oracle,
        recon: ReconReport {
            mpjpe: parse(ck, "teacher.recon_mpjpe")?,
            feature_error: parse(ck, "teacher.recon_feature_error")?,
        },
        gate_fid: ck.metadata.get("teacher.gate_fid").map(|v| v.parse()).transpose().map_err(|_| {
            Error::Invalid("metadata 'teacher.gate_fid' is not a number".into())
        })?,
        config,
    })
}

/// Teacher plus the full distillation state, so one file can both sample and resume.
pub fn student_checkpoint(teacher: &TeacherBundle, cfg: &DistillConfig, run: &DistillRun) -> Result<Checkpoint> {
    let mut ck = Checkpoint::default();
    ck.set_meta("kind", "student");
    write_teacher(&mut ck, teacher)?;
    for (k, v) in cfg.pairs() {
        ck.set_meta(format!("{DISTILL_CFG}{k}"), v);
    }
    let edges: Vec<String> = run.partition.edges().iter().map(ToString::to_string).collect();
    ck.set_meta("partition", edges.join(","));
    ck.set_meta("step", run.state.step);
    ck.set_meta("student.adam_t", run.state.opt_theta.t);
    ck.set_meta("disc.adam_t", run.state.opt_disc.t);
    if let Some(e) = &run.aborted {
        ck.set_meta("aborted", e);
    }
    let st = &run.state;
    ck.push_flat("student.theta", st.theta.params.values.clone())?;
    ck.push_flat("student.adam_m", st.opt_theta.m.clone())?;
    ck.push_flat("student.adam_v", st.opt_theta.v.clone())?;
    ck.push_flat("target.theta", st.theta_minus.params.values.clone())?;
    ck.push_flat("disc.head", st.disc.head.values.clone())?;
    ck.push_flat("disc.adam_m", st.opt_disc.m.clone())?;
    ck.push_flat("disc.adam_v", st.opt_disc.v.clone())?;
    Ok(ck)
}

pub fn read_student(ck: &Checkpoint) -> Result<(TeacherBundle, DistillConfig, DistillRun)> {
    let teacher = read_teacher(ck)?;
    let cfg: DistillConfig = prefixed(ck, DISTILL_CFG)?;
    let edges = ck
        .meta("partition")?
        .split(',')
        .map(|v| v.parse().map_err(|_| Error::Invalid(format!("bad partition edge '{v}'"))))
        .collect::<Result<Vec<usize>>>()?;
    let partition = PhasePartition::from_edges(edges)?;
    let spec = teacher.eps_net.spec.with_omega(OMEGA_DIM);
    let net = |name| -> Result<CondNet> { CondNet::from_params(spec, params(ck, name, spec.layout())?) };
    let theta = net("student.theta")?;
    let theta_minus = net("target.theta")?;
    let head = params(ck, "disc.head", head_layout(teacher.eps_net.params.layout().feature_dim()))?;
    let adam = |m: &str, v: &str, t: &str| -> Result<AdamW> {
        Ok(AdamW {
            config: AdamConfig::default(),
            m: ck.require(m)?.data.clone(),
            v: ck.require(v)?.data.clone(),
            t: parse(ck, t)?,
        })
    };
    let state = DistillState {
        opt_theta: adam("student.adam_m", "student.adam_v", "student.adam_t")?,
        opt_disc: adam("disc.adam_m", "disc.adam_v", "disc.adam_t")?,
        theta,
        theta_minus,
        disc: Discriminator { head },
        step: parse(ck, "step")?,
    };
    let run = DistillRun {
        state,
        partition,
        aborted: None,
    };
    Ok((teacher, cfg, run))
}

/// The released network of a student checkpoint.
pub fn read_released(ck: &Checkpoint) -> Result<(TeacherBundle, Student)> {
    let (t, _, run) = read_student(ck)?;
    Ok((t, run.student()))
}
