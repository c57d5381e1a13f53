//! Subcommand implementations: every pipeline stage is a pure function of
//! (configuration, seeds, input files) and writes its outputs atomically, so
//! reruns are byte-identical.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use cef_core::denoiser::{
    AnalyticGaussianModel, ConvNet, ConvNetBackend, ConvNetConfig, Denoiser, Preconditioned,
};
use cef_core::forecast::{
    ar_baseline, arci_forecast, continuous_forecast, deterministic_forecast,
    extended_continuous_forecast, DirectModel, ForecastPlan,
};
use cef_core::grid::{AlgorithmId, EnsembleForecast, Provenance};
use cef_core::metrics::{evaluate, EvaluateOptions, ForecastCase, MetricReport};
use cef_core::rng::mix64;
use cef_core::sampler::SamplerConfig;
use cef_core::train::{
    compute_leadtime_scales, denoising_loss_value, draw_batch, train, train_deterministic,
    LeadTimeScale, TrainConfig,
};

use crate::config::{BackendKind, LoadedConfig, TrainSection};
use crate::container::{
    read_container, write_container, ContainerHeader, ContainerKind, Dtype,
};
use crate::dataset::{
    generate_dataset, read_forecast, write_forecast, Dataset, DatasetSource, SplitFiles,
    SplitFractions,
};
use crate::error::{HarnessError, Result};
use crate::toy::{LinearGaussPrior, ToySystemKind};

/// `generate-data`: simulate the configured system and write the three
/// split files into `out_dir`.
pub fn run_generate(loaded: &LoadedConfig, out_dir: &Path, seed: Option<u64>) -> Result<SplitFiles> {
    let mut system = loaded.config.data.system.clone();
    if let Some(s) = seed {
        system.base_seed = s;
    }
    let (ft, fv, fe) = loaded.config.data.split_fractions;
    generate_dataset(
        &system,
        loaded.config.data.length_hours,
        SplitFractions(ft, fv, fe),
        loaded.config.data.margin_hours,
        out_dir,
        Some(loaded.hash.clone()),
    )
}

/// A trained model bundle as persisted in a checkpoint container.
pub struct Checkpoint {
    pub net: ConvNet,
    pub trained_lead_times: Vec<f64>,
    pub window_offsets: Vec<f64>,
    pub scales: LeadTimeScale,
    pub config_hash: Option<String>,
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut header = ContainerHeader::new(
        ContainerKind::Checkpoint,
        Dtype::F64,
        vec![ckpt.net.param_count()],
        vec!["theta".into()],
    );
    header.arch = Some(ckpt.net.config.clone());
    header.trained_lead_times = Some(ckpt.trained_lead_times.clone());
    header.init_times = Some(ckpt.window_offsets.clone());
    header.lead_time_scales = Some(ckpt.scales.clone());
    header.config_hash = ckpt.config_hash.clone();
    write_container(path, &header, &ckpt.net.theta)
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let (header, payload) = read_container(path)?;
    if header.kind != ContainerKind::Checkpoint {
        return Err(HarnessError::validation(format!(
            "{}: expected a checkpoint container",
            path.display()
        )));
    }
    let arch: ConvNetConfig = header
        .arch
        .ok_or_else(|| HarnessError::validation("checkpoint lacks architecture"))?;
    let net = ConvNet::from_theta(arch, payload).map_err(HarnessError::from)?;
    Ok(Checkpoint {
        net,
        trained_lead_times: header.trained_lead_times.unwrap_or_default(),
        window_offsets: header.init_times.unwrap_or_default(),
        scales: header
            .lead_time_scales
            .ok_or_else(|| HarnessError::validation("checkpoint lacks lead-time scales"))?,
        config_hash: header.config_hash,
    })
}

fn train_section(loaded: &LoadedConfig) -> Result<&TrainSection> {
    loaded
        .config
        .train
        .as_ref()
        .ok_or_else(|| HarnessError::validation("config lacks a train section"))
}

fn build_net_config(
    ts: &TrainSection,
    data: &Dataset,
    noisy_input: bool,
) -> ConvNetConfig {
    ConvNetConfig {
        n_vars: data.grid.n_vars(),
        height: data.grid.height,
        width: data.grid.width,
        cond_channels: ts.window_offsets.len() * data.grid.n_vars()
            + data.grid.static_fields.len(),
        channels: ts.channels,
        n_blocks: ts.n_blocks,
        embedding: Default::default(),
        t_max_hours: ts.t_max_hours,
        dropout_p: ts.dropout,
        noisy_input,
    }
}

pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub final_train_loss: f64,
    pub validation_loss: Option<f64>,
    pub oracle_validation_loss: Option<f64>,
}

/// `train`: fit the diffusion denoiser on the train split, tabulate
/// lead-time scales, optionally score a validation split, and persist the
/// checkpoint plus the loss curve CSV.
pub fn run_train(
    loaded: &LoadedConfig,
    train_path: &Path,
    val_path: Option<&Path>,
    out_path: &Path,
    seed: Option<u64>,
) -> Result<TrainSummary> {
    let ts = train_section(loaded)?;
    let data = Arc::new(Dataset::load(train_path)?);
    let horizon = ts
        .lead_times
        .iter()
        .cloned()
        .fold(0.0f64, f64::max)
        .max(ts.t_max_hours);
    let source = DatasetSource::new(data.clone(), ts.window_offsets.clone(), horizon)?;
    let scales = compute_leadtime_scales(&source, &ts.lead_times, ts.scale_kind, ts.scale_pairs)
        .map_err(HarnessError::from)?;

    let seed_train = seed.unwrap_or(loaded.config.seeds.train);
    let net = ConvNet::init(build_net_config(ts, &data, true), mix64(seed_train ^ 0x1217))
        .map_err(HarnessError::from)?;
    let tc = TrainConfig {
        peak_lr: ts.peak_lr,
        weight_decay: ts.weight_decay,
        warmup_steps: ts.warmup_steps,
        total_steps: ts.total_steps,
        batch_size: ts.batch_size,
        train_schedule: loaded.config.diffusion.training.to_schedule()?,
        lead_times: ts.lead_times.clone(),
        scale_kind: ts.scale_kind,
        seed: seed_train,
        sigma_data: loaded.config.diffusion.sigma_data,
    };
    let outcome = train(&source, net, &tc, &scales).map_err(HarnessError::from)?;

    // Validation: mean denoising loss over fixed keyed batches, dropout off.
    let mut validation_loss = None;
    let mut oracle_validation_loss = None;
    if let Some(vp) = val_path {
        let val = Arc::new(Dataset::load(vp)?);
        let val_source = DatasetSource::new(val.clone(), ts.window_offsets.clone(), horizon)?;
        let mut val_cfg = tc.clone();
        val_cfg.seed = mix64(seed_train ^ 0x7a1);
        let denoiser = Preconditioned::new(ConvNetBackend::new(Arc::new(outcome.net.clone())));
        let mut acc = 0.0;
        let mut oracle_acc = 0.0;
        let n_batches = 8;
        let oracle = analytic_denoiser_for(&val)?;
        for b in 0..n_batches {
            let batch = draw_batch(&val_source, &val_cfg, b).map_err(HarnessError::from)?;
            acc += denoising_loss_value(&denoiser, &batch, &scales).map_err(HarnessError::from)?;
            if let Some(model) = &oracle {
                oracle_acc +=
                    denoising_loss_value(model.as_ref(), &batch, &scales).map_err(HarnessError::from)?;
            }
        }
        validation_loss = Some(acc / n_batches as f64);
        if oracle.is_some() {
            oracle_validation_loss = Some(oracle_acc / n_batches as f64);
        }
    }

    let ckpt = Checkpoint {
        net: outcome.net,
        trained_lead_times: ts.lead_times.clone(),
        window_offsets: ts.window_offsets.clone(),
        scales,
        config_hash: Some(loaded.hash.clone()),
    };
    write_checkpoint(out_path, &ckpt)?;
    let mut curve = String::from("step,loss\n");
    for (s, l) in &outcome.loss_curve {
        curve.push_str(&format!("{s},{l}\n"));
    }
    write_atomic(&out_path.with_extension("loss.csv"), curve.as_bytes())?;
    Ok(TrainSummary {
        checkpoint: out_path.to_path_buf(),
        final_train_loss: outcome.loss_curve.last().map(|(_, l)| *l).unwrap_or(f64::NAN),
        validation_loss,
        oracle_validation_loss,
    })
}

/// `train --deterministic`: the MSE baseline on a single fixed step.
pub fn run_train_deterministic(
    loaded: &LoadedConfig,
    train_path: &Path,
    out_path: &Path,
    seed: Option<u64>,
) -> Result<TrainSummary> {
    let ts = train_section(loaded)?;
    let data = Arc::new(Dataset::load(train_path)?);
    let delta = ts.lead_times[0];
    let source = DatasetSource::new(data.clone(), ts.window_offsets.clone(), delta)?;
    let seed_train = seed.unwrap_or(loaded.config.seeds.train);
    let net = ConvNet::init(build_net_config(ts, &data, false), mix64(seed_train ^ 0x1218))
        .map_err(HarnessError::from)?;
    let tc = TrainConfig {
        peak_lr: ts.peak_lr,
        weight_decay: ts.weight_decay,
        warmup_steps: ts.warmup_steps,
        total_steps: ts.total_steps,
        batch_size: ts.batch_size,
        train_schedule: loaded.config.diffusion.training.to_schedule()?,
        lead_times: vec![delta],
        scale_kind: ts.scale_kind,
        seed: seed_train,
        sigma_data: loaded.config.diffusion.sigma_data,
    };
    let outcome = train_deterministic(&source, net, &tc).map_err(HarnessError::from)?;
    let ckpt = Checkpoint {
        net: outcome.net,
        trained_lead_times: vec![delta],
        window_offsets: ts.window_offsets.clone(),
        scales: LeadTimeScale::unit(vec![delta], data.grid.n_vars()),
        config_hash: Some(loaded.hash.clone()),
    };
    write_checkpoint(out_path, &ckpt)?;
    Ok(TrainSummary {
        checkpoint: out_path.to_path_buf(),
        final_train_loss: outcome.loss_curve.last().map(|(_, l)| *l).unwrap_or(f64::NAN),
        validation_loss: None,
        oracle_validation_loss: None,
    })
}

/// The exact linear-Gauss denoiser for a dataset, when its system admits one.
pub fn analytic_denoiser_for(data: &Dataset) -> Result<Option<Box<dyn Denoiser>>> {
    match &data.system.kind {
        ToySystemKind::LinearGauss(params) => {
            let prior = LinearGaussPrior::new(&data.system, *params, &data.grid)?;
            Ok(Some(Box::new(AnalyticGaussianModel::new(Arc::new(prior)))))
        }
        _ => Ok(None),
    }
}

struct DeterministicNet {
    net: ConvNet,
}

impl DirectModel for DeterministicNet {
    fn predict(
        &self,
        window: &cef_core::grid::ConditioningWindow,
        lead_time: f64,
    ) -> cef_core::Result<ndarray::Array3<f64>> {
        self.net
            .forward(None, &window.stack_channels(), 0.0, lead_time)
    }
}

/// `forecast`: sample ensembles for the configured cases from a dataset
/// split, using either a trained checkpoint or the analytic oracle, and
/// persist them into one forecast container.
pub fn run_forecast(
    loaded: &LoadedConfig,
    data_path: &Path,
    checkpoint_path: Option<&Path>,
    out_path: &Path,
    seed: Option<u64>,
) -> Result<()> {
    let fs = loaded
        .config
        .forecast
        .as_ref()
        .ok_or_else(|| HarnessError::validation("config lacks a forecast section"))?;
    let data = Arc::new(Dataset::load(data_path)?);
    let master_seed = seed.unwrap_or(loaded.config.seeds.master);

    // Resolve the backend.
    let mut trained_lead_times = None;
    let (denoiser, direct): (Option<Box<dyn Denoiser>>, Option<DeterministicNet>) =
        match (fs.backend, fs.algorithm) {
            (_, AlgorithmId::Deterministic) => {
                let path = checkpoint_path.ok_or_else(|| {
                    HarnessError::validation("deterministic forecast needs --checkpoint")
                })?;
                let ckpt = read_checkpoint(path)?;
                (None, Some(DeterministicNet { net: ckpt.net }))
            }
            (BackendKind::Checkpoint, _) => {
                let path = checkpoint_path.ok_or_else(|| {
                    HarnessError::validation("checkpoint backend needs --checkpoint")
                })?;
                let ckpt = read_checkpoint(path)?;
                trained_lead_times = Some(ckpt.trained_lead_times.clone());
                (
                    Some(Box::new(Preconditioned::new(ConvNetBackend::new(Arc::new(
                        ckpt.net,
                    ))))),
                    None,
                )
            }
            (BackendKind::AnalyticLinearGauss, _) => {
                let model = analytic_denoiser_for(&data)?.ok_or_else(|| {
                    HarnessError::validation(
                        "analytic backend requires a linear-gauss dataset",
                    )
                })?;
                (Some(model), None)
            }
        };

    let sampler = SamplerConfig {
        schedule: loaded.config.diffusion.sampling.to_schedule()?,
        initial_scale_rule: loaded.config.diffusion.initial_scale_rule,
    };

    // Lead-time span of one case, for margin accounting.
    let block_span: f64 = match &fs.block_times {
        Some(blocks) => blocks.iter().map(|b| b.last().copied().unwrap_or(0.0)).sum(),
        None => fs.times.last().copied().unwrap_or(0.0) * fs.ar_steps as f64,
    };
    let horizon = match fs.algorithm {
        AlgorithmId::Continuous | AlgorithmId::ContinuousOu => {
            fs.times.last().copied().unwrap_or(0.0)
        }
        _ => block_span,
    };
    let depth = fs.window_offsets.iter().fold(0.0f64, |a, &o| a.max(-o));
    let inits = data.usable_inits(depth, horizon, fs.case_stride_hours);
    if inits.len() < fs.n_cases {
        return Err(HarnessError::validation(format!(
            "only {} usable init times for {} requested cases",
            inits.len(),
            fs.n_cases
        )));
    }
    let inits = &inits[..fs.n_cases];

    let mut cases: Vec<EnsembleForecast> = Vec::with_capacity(fs.n_cases);
    let mut init_hours = Vec::with_capacity(fs.n_cases);
    for &init in inits {
        let window = data.window_at(init, &fs.window_offsets)?;
        // Per-case seed keyed by the absolute init index so case order and
        // count never change the noise.
        let case_seed = mix64(master_seed ^ (init as u64).wrapping_mul(0x9e37_79b9));
        let mut plan = ForecastPlan::new(fs.algorithm, fs.times.clone(), fs.n_ens, case_seed);
        plan.block_times = fs.block_times.clone();
        plan.ar_steps = fs.ar_steps;
        plan.rho = fs.rho.map(|r| r.to_rho()).transpose()?;
        plan.trained_lead_times = trained_lead_times.clone();
        let fc = match fs.algorithm {
            AlgorithmId::Continuous => {
                continuous_forecast(&window, &plan, &sampler, denoiser.as_ref().unwrap().as_ref())
            }
            AlgorithmId::ContinuousOu => extended_continuous_forecast(
                &window,
                &plan,
                &sampler,
                denoiser.as_ref().unwrap().as_ref(),
            ),
            AlgorithmId::Arci => {
                arci_forecast(&window, &plan, &sampler, denoiser.as_ref().unwrap().as_ref())
            }
            AlgorithmId::ArBaseline => {
                let delta = *fs.times.last().ok_or_else(|| {
                    HarnessError::validation("ar_baseline needs a step length in times")
                })?;
                ar_baseline(
                    &window,
                    delta,
                    fs.ar_steps,
                    fs.n_ens,
                    case_seed,
                    &sampler,
                    denoiser.as_ref().unwrap().as_ref(),
                )
            }
            AlgorithmId::Deterministic => {
                let delta = *fs.times.last().ok_or_else(|| {
                    HarnessError::validation("deterministic forecast needs a step length")
                })?;
                let model = direct.as_ref().unwrap();
                let traj = deterministic_forecast(&window, delta, fs.ar_steps, model)
                    .map_err(HarnessError::from)?;
                let lead_times: Vec<f64> = traj.iter().map(|s| s.valid_time).collect();
                EnsembleForecast::new(
                    lead_times,
                    vec![traj],
                    Provenance {
                        algorithm: AlgorithmId::Deterministic,
                        master_seed: case_seed,
                        rho: None,
                        schedule_hash: sampler.schedule.content_hash(),
                        extrapolated: false,
                    },
                )
            }
        }
        .map_err(HarnessError::from)?;
        init_hours.push(data.times.hour_at(init));
        cases.push(fc);
    }
    write_forecast(out_path, &cases, &init_hours, Some(loaded.hash.clone()))
}

/// `evaluate`: align a forecast container with truth from a dataset split
/// and write the metric CSV plus a provenance sidecar.
pub fn run_evaluate(
    loaded: &LoadedConfig,
    forecast_path: &Path,
    truth_path: &Path,
    out_csv: &Path,
) -> Result<MetricReport> {
    let (forecasts, init_hours, fc_header) = read_forecast(forecast_path)?;
    let truth_data = Dataset::load(truth_path)?;
    let mut cases = Vec::with_capacity(forecasts.len());
    for (fc, &hour) in forecasts.into_iter().zip(&init_hours) {
        let init = truth_data.times.index_of(hour).ok_or_else(|| {
            HarnessError::validation(format!(
                "forecast init hour {hour} is not in the truth split"
            ))
        })?;
        let truth = truth_data.truth_at(init, &fc.lead_times)?;
        cases.push(ForecastCase {
            forecast: fc,
            truth,
        });
    }
    let report = evaluate(
        &cases,
        EvaluateOptions {
            fair_crps: loaded.config.evaluate.fair_crps,
            derived_wind: loaded.config.evaluate.derived_wind,
        },
    )
    .map_err(HarnessError::from)?;
    write_atomic(out_csv, report.to_csv().as_bytes())?;
    let meta = serde_json::json!({
        "config_hash": loaded.hash,
        "forecast_config_hash": fc_header.config_hash,
        "provenance": fc_header.provenance,
        "n_cases": init_hours.len(),
    });
    write_atomic(
        &out_csv.with_extension("meta.json"),
        serde_json::to_string_pretty(&meta)?.as_bytes(),
    )?;
    Ok(report)
}

/// Gradient check over random probes: backend loss gradients against
/// central finite differences in f64. Returns the worst relative error.
pub fn run_gradcheck(seed: u64, probes: usize) -> Result<f64> {
    use cef_core::denoiser::embed::EmbeddingConfig;
    use cef_core::grid::{GridSpec, GridState};
    use cef_core::rng::{normal_field, StreamKey, StreamPurpose};
    use cef_core::train::{denoising_loss, LossBatchItem, TrainingExample};
    use rand::Rng;

    let spec = Arc::new(GridSpec::uniform(3, 5, 1));
    let shape = (1, 3, 5);
    let cfg = ConvNetConfig {
        n_vars: 1,
        height: 3,
        width: 5,
        cond_channels: 2,
        channels: 5,
        n_blocks: 2,
        embedding: EmbeddingConfig {
            frequency_count: 6,
            period: 16.0,
            output_dim: 12,
        },
        t_max_hours: 24.0,
        dropout_p: 0.0,
        noisy_input: true,
    };
    let net = ConvNet::init(cfg, seed).map_err(HarnessError::from)?;
    let scales = LeadTimeScale::unit(vec![6.0], 1);
    let mk_batch = |k: u64| -> Result<Vec<LossBatchItem>> {
        let window_state = normal_field(StreamKey::new(seed, StreamPurpose::Test, k, 0), shape);
        let prev = normal_field(StreamKey::new(seed, StreamPurpose::Test, k, 1), shape);
        let target = normal_field(StreamKey::new(seed, StreamPurpose::Test, k, 2), shape);
        let window = cef_core::grid::ConditioningWindow::new(
            vec![
                GridState::new(spec.clone(), window_state, 0.0).map_err(HarnessError::from)?,
                GridState::new(spec.clone(), prev, -6.0).map_err(HarnessError::from)?,
            ],
            vec![0.0, -6.0],
        )
        .map_err(HarnessError::from)?;
        let sigma = 0.9;
        let eps = normal_field(StreamKey::new(seed, StreamPurpose::Test, k, 3), shape) * sigma;
        Ok(vec![LossBatchItem {
            example: TrainingExample {
                window,
                lead_time: 6.0,
                target: GridState::new(spec.clone(), target, 6.0)
                    .map_err(HarnessError::from)?,
            },
            sigma,
            epsilon: eps,
        }])
    };
    let batch = mk_batch(0)?;
    let (_, grad) = denoising_loss(&net, &batch, &scales, 1.0, None).map_err(HarnessError::from)?;
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut rng = StreamKey::new(seed ^ 0xfd, StreamPurpose::Test, 0, 0).rng();
    for _ in 0..probes {
        let idx = rng.random_range(0..net.param_count());
        let mut plus = net.clone();
        plus.theta[idx] += h;
        let mut minus = net.clone();
        minus.theta[idx] -= h;
        let (lp, _) =
            denoising_loss(&plus, &batch, &scales, 1.0, None).map_err(HarnessError::from)?;
        let (lm, _) =
            denoising_loss(&minus, &batch, &scales, 1.0, None).map_err(HarnessError::from)?;
        let fd = (lp - lm) / (2.0 * h);
        let rel = (grad[idx] - fd).abs() / (fd.abs() + 1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}

/// Quick end-to-end invariant suite for the `selftest` subcommand. Returns
/// the list of check names run; any failure surfaces as an error.
pub fn run_selftest() -> Result<Vec<&'static str>> {
    use cef_core::edm::{precondition, schedule_levels, NoiseSchedule};
    use cef_core::metrics::{crps, CaseEnsemble};
    use cef_core::noise::{ou_step, Rho};
    use cef_core::rng::{normal_field, StreamKey, StreamPurpose};
    use ndarray::Array2;

    let mut passed = Vec::new();

    // EDM identities on a log grid.
    for i in 0..60 {
        let sigma = 10f64.powf(-3.0 + 6.0 * i as f64 / 59.0);
        let c = precondition(sigma, 1.0).map_err(HarnessError::from)?;
        let (r1, r2) = c.identity_residuals(sigma, 1.0);
        if r1.abs() > 1e-12 || r2.abs() > 1e-12 {
            return Err(HarnessError::runtime(format!(
                "precondition identities violated at sigma {sigma}"
            )));
        }
    }
    passed.push("edm identities");

    // Schedule endpoints and monotonicity at Table-4 parameters.
    let lv = schedule_levels(&NoiseSchedule::sampling_default());
    if lv[0] != 80.0 || lv[19] != 0.03 || lv[20] != 0.0 || lv.windows(2).any(|p| p[0] <= p[1]) {
        return Err(HarnessError::runtime("schedule endpoints or order broken".into()));
    }
    passed.push("schedule levels");

    // OU marginal preservation and the fixed-noise limit.
    let z = normal_field(StreamKey::new(1, StreamPurpose::Test, 0, 0), (1, 2, 2));
    let nu = normal_field(StreamKey::new(1, StreamPurpose::Test, 0, 1), (1, 2, 2));
    let fixed = ou_step(&z, 1.0, Rho::Finite(0.0), &nu).map_err(HarnessError::from)?;
    if !fixed.iter().zip(z.iter()).all(|(a, b)| a.to_bits() == b.to_bits()) {
        return Err(HarnessError::runtime("rho=0 OU step not bit-exact".into()));
    }
    passed.push("ou fixed-noise limit");

    // CRPS sorted implementation against the brute-force double loop.
    let mut rng = StreamKey::new(2, StreamPurpose::Test, 0, 0).rng();
    use rand::Rng;
    let spec = cef_core::grid::GridSpec::uniform(2, 2, 1);
    let cases: Vec<CaseEnsemble> = (0..4)
        .map(|_| CaseEnsemble {
            members: (0..5)
                .map(|_| Array2::from_shape_fn((2, 2), |_| rng.random_range(-2.0..2.0)))
                .collect(),
            truth: Array2::from_shape_fn((2, 2), |_| rng.random_range(-2.0..2.0)),
        })
        .collect();
    let fast = crps(&cases, &spec, false).map_err(HarnessError::from)?;
    let mut slow = 0.0;
    for case in &cases {
        let mut wsum = 0.0;
        for y in 0..2 {
            for x in 0..2 {
                let t = case.truth[[y, x]];
                let vals: Vec<f64> = case.members.iter().map(|m| m[[y, x]]).collect();
                let mae: f64 = vals.iter().map(|v| (v - t).abs()).sum::<f64>() / 5.0;
                let mut pairs = 0.0;
                for a in &vals {
                    for b in &vals {
                        pairs += (a - b).abs();
                    }
                }
                wsum += mae - pairs / 50.0;
            }
        }
        slow += wsum / 4.0;
    }
    slow /= 4.0;
    if (fast - slow).abs() > 1e-12 {
        return Err(HarnessError::runtime(format!(
            "CRPS mismatch: {fast} vs {slow}"
        )));
    }
    passed.push("crps double-loop oracle");

    // Container round trip in a scratch directory.
    let dir = std::env::temp_dir().join(format!("cef-selftest-{}", std::process::id()));
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("probe.cef");
    let payload: Vec<f64> = (0..6).map(|i| i as f64 * 0.5).collect();
    let header = ContainerHeader::new(
        ContainerKind::Dataset,
        Dtype::F32,
        vec![2, 3],
        vec!["a".into(), "b".into()],
    );
    write_container(&path, &header, &payload)?;
    let (h2, p2) = read_container(&path)?;
    std::fs::remove_dir_all(&dir).ok();
    if h2 != header || p2 != payload {
        return Err(HarnessError::runtime("container round trip failed".into()));
    }
    passed.push("container round trip");

    // Gradient probe.
    let worst = run_gradcheck(11, 10)?;
    if worst > 1e-5 {
        return Err(HarnessError::runtime(format!(
            "gradient check failed: worst relative error {worst}"
        )));
    }
    passed.push("gradient probes");

    Ok(passed)
}

/// Atomic write used for CSV and sidecar outputs.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let tmp = path.with_extension("tmp-write");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}
