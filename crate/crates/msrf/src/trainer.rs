//! Training loop, evaluation, prediction, and the finite-difference
//! gradient check harness.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::data::{boundary_map, load_dataset, save_pgm, split, synth_dataset, Sample};
use crate::error::{Error, Result};
use crate::loss::total_loss;
use crate::metrics::{binarize, confusion_counts, MetricsReport, BIN_THRESHOLD};
use crate::network::{msrfnet_forward, param_count_report, param_specs, MsrfNetConfig};
use crate::optim::Adam;
use crate::params::ParamStore;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Image/mask/boundary tensors for one mini-batch.
pub struct Batch {
    pub images: Tensor,
    pub masks: Tensor,
    pub edges: Tensor,
    pub ids: Vec<String>,
}

/// Stacks samples into NCHW tensors and extracts the boundary targets.
pub fn make_batch(samples: &[&Sample], input_ch: usize) -> Result<Batch> {
    if samples.is_empty() {
        return Err(Error::usage("empty batch".to_string()));
    }
    let (h, w) = (samples[0].image.shape[1], samples[0].image.shape[2]);
    let n = samples.len();
    let mut images = Tensor::zeros(vec![n, input_ch, h, w]);
    let mut masks = Tensor::zeros(vec![n, 1, h, w]);
    let mut edges = Tensor::zeros(vec![n, 1, h, w]);
    let plane = h * w;
    for (i, s) in samples.iter().enumerate() {
        if s.image.shape != vec![1, h, w] || s.mask.shape != vec![1, h, w] {
            return Err(Error::shape(format!(
                "sample `{}` has shape {:?}/{:?}, batch expects [1,{},{}]",
                s.id, s.image.shape, s.mask.shape, h, w
            )));
        }
        // Grayscale data replicated across configured input channels.
        for c in 0..input_ch {
            images.data[(i * input_ch + c) * plane..(i * input_ch + c + 1) * plane]
                .copy_from_slice(&s.image.data);
        }
        masks.data[i * plane..(i + 1) * plane].copy_from_slice(&s.mask.data);
        let edge = boundary_map(&s.mask)?;
        edges.data[i * plane..(i + 1) * plane].copy_from_slice(&edge.data);
    }
    Ok(Batch { images, masks, edges, ids: samples.iter().map(|s| s.id.clone()).collect() })
}

/// Loss of one batch plus parameter gradients (training mode).
fn batch_loss_and_grads(
    cfg: &RunConfig,
    params: &ParamStore,
    batch: &Batch,
    dropout_seed: u64,
) -> Result<(f64, BTreeMap<String, Tensor>)> {
    let mut tape = Tape::new();
    tape.set_dropout_rng(ChaCha8Rng::seed_from_u64(dropout_seed));
    let image = tape.constant(batch.images.clone());
    let outs = msrfnet_forward(&mut tape, params, &cfg.net, image, true)?;
    let loss = total_loss(&mut tape, &outs, &batch.masks, &batch.edges, &cfg.weights, cfg.loss_mode)?;
    let loss_value = tape.value(loss).item()?;
    let grads = tape.backward(loss)?;
    Ok((loss_value, grads.param_map(&tape)))
}

/// Forward pass in eval mode; returns the sigmoid prediction map and the
/// edge map when the shape stream is enabled.
pub fn predict_batch(
    cfg: &MsrfNetConfig,
    params: &ParamStore,
    batch: &Batch,
) -> Result<(Tensor, Option<Tensor>)> {
    let mut tape = Tape::new();
    let image = tape.constant(batch.images.clone());
    let outs = msrfnet_forward(&mut tape, params, cfg, image, false)?;
    let pred = tape.value(outs.pred).clone();
    let edge = outs.edge.map(|e| tape.value(e).clone());
    Ok((pred, edge))
}

/// Per-image metrics of a parameter set over a sample list.
pub fn evaluate(
    cfg: &MsrfNetConfig,
    params: &ParamStore,
    samples: &[Sample],
    batch_size: usize,
) -> Result<MetricsReport> {
    let mut report = MetricsReport::default();
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let batch = make_batch(&refs, cfg.input_ch)?;
        let (pred, _) = predict_batch(cfg, params, &batch)?;
        let (h, w) = (pred.shape[2], pred.shape[3]);
        let plane = h * w;
        for (i, id) in batch.ids.iter().enumerate() {
            let p = Tensor::new(vec![1, h, w], pred.data[i * plane..(i + 1) * plane].to_vec())?;
            let bin = binarize(&p, BIN_THRESHOLD);
            let counts = confusion_counts(&bin, &chunk[i].mask)?;
            report.push(id.clone(), &counts);
        }
    }
    Ok(report)
}

pub struct TrainOutput {
    pub best_params: ParamStore,
    pub best_val_dsc: f64,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub log_lines: Vec<String>,
}

/// Runs the seeded training loop over explicit train/validation sample
/// lists. `on_epoch(epoch, train_loss, val_dsc, params)` may return `false`
/// to stop early; the best-validation parameters are retained either way.
/// When the validation list is empty the train list doubles as the
/// selection set.
pub fn train_loop(
    cfg: &RunConfig,
    train: &[Sample],
    val: &[Sample],
    mut on_epoch: impl FnMut(usize, f64, f64, &ParamStore) -> bool,
) -> Result<TrainOutput> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::config("training set is empty".to_string()));
    }
    let specs = param_specs(&cfg.net);
    let mut params = ParamStore::init_glorot(&specs, cfg.seed);
    let mut opt = Adam::new(cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let val_set = if val.is_empty() { train } else { val };

    let mut best_params = params.clone();
    let mut best_val_dsc = f64::NEG_INFINITY;
    let mut best_epoch = 0;
    let mut log_lines = Vec::new();
    let mut epochs_run = 0;

    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.epochs {
        epochs_run = epoch;
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let refs: Vec<&Sample> = chunk.iter().map(|&i| &train[i]).collect();
            let batch = make_batch(&refs, cfg.net.input_ch)?;
            let dropout_seed = rng.gen::<u64>();
            let (loss, grads) = batch_loss_and_grads(cfg, &params, &batch, dropout_seed)?;
            opt.step(&mut params, &grads)?;
            loss_sum += loss * chunk.len() as f64;
        }
        let train_loss = loss_sum / train.len() as f64;
        let val_dsc = evaluate(&cfg.net, &params, val_set, cfg.batch_size)?.mean_dsc();
        log_lines.push(format!("epoch {:>4} train_loss {:.6} val_dsc {:.6}", epoch, train_loss, val_dsc));
        if val_dsc > best_val_dsc {
            best_val_dsc = val_dsc;
            best_epoch = epoch;
            best_params = params.clone();
        }
        if !on_epoch(epoch, train_loss, val_dsc, &params) {
            break;
        }
    }
    Ok(TrainOutput { best_params, best_val_dsc, best_epoch, epochs_run, log_lines })
}

/// The `train` command: loads the dataset, splits 80/10/10, trains, and
/// writes `train.log` plus the best-validation checkpoint into `out_dir`.
pub fn train_command(cfg: &RunConfig, quiet: bool) -> Result<TrainOutput> {
    let data_root = cfg
        .data_root
        .as_ref()
        .ok_or_else(|| Error::config("train requires data_root".to_string()))?;
    let out_dir = cfg
        .out_dir
        .as_ref()
        .ok_or_else(|| Error::config("train requires out_dir".to_string()))?;
    cfg.validate()?;
    let dataset = load_dataset(data_root)?;
    fs::create_dir_all(out_dir)?;
    let (train, val, _test) = split(&dataset, cfg.seed);

    let report = param_count_report(&cfg.net);
    if !quiet {
        print!("{report}");
    }

    let ckpt_every = cfg.checkpoint_every;
    let mut periodic_err: Option<Error> = None;
    let out = train_loop(cfg, &train, &val, |epoch, train_loss, val_dsc, params| {
        if !quiet {
            println!("epoch {:>4} train_loss {:.6} val_dsc {:.6}", epoch, train_loss, val_dsc);
        }
        if ckpt_every > 0 && epoch % ckpt_every == 0 {
            if let Err(e) = params.save(&out_dir.join(format!("epoch_{}.ckpt", epoch))) {
                periodic_err = Some(e);
                return false;
            }
        }
        true
    })?;
    if let Some(e) = periodic_err {
        return Err(e);
    }

    let mut log_text = report;
    for line in &out.log_lines {
        log_text.push_str(line);
        log_text.push('\n');
    }
    log_text.push_str(&format!(
        "best epoch {} val_dsc {:.6}\n",
        out.best_epoch, out.best_val_dsc
    ));
    fs::write(out_dir.join("train.log"), &log_text)?;
    out.best_params.save(&out_dir.join("best.ckpt"))?;
    Ok(out)
}

/// The `eval` command body: checkpoint against a dataset directory.
pub fn eval_command(cfg: &RunConfig, checkpoint: &Path, data: &Path) -> Result<MetricsReport> {
    let specs = param_specs(&cfg.net);
    let params = ParamStore::load(checkpoint, &specs)?;
    let dataset = load_dataset(data)?;
    evaluate(&cfg.net, &params, &dataset, cfg.batch_size)
}

/// The `predict` command body: writes a binarized mask PGM per input image
/// (and an edge-probability PGM when the shape stream is on). Returns the
/// written mask paths.
pub fn predict_command(
    cfg: &RunConfig,
    checkpoint: &Path,
    inputs: &[std::path::PathBuf],
    out_dir: &Path,
) -> Result<Vec<std::path::PathBuf>> {
    let specs = param_specs(&cfg.net);
    let params = ParamStore::load(checkpoint, &specs)?;
    fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    for path in inputs {
        let image = crate::data::load_pgm(path)?;
        let id = path
            .file_stem()
            .ok_or_else(|| Error::usage(format!("bad input path {}", path.display())))?
            .to_string_lossy()
            .to_string();
        let sample = Sample { id: id.clone(), image: image.clone(), mask: Tensor::zeros(image.shape.clone()) };
        let batch = make_batch(&[&sample], cfg.net.input_ch)?;
        let (pred, edge) = predict_batch(&cfg.net, &params, &batch)?;
        let (h, w) = (pred.shape[2], pred.shape[3]);
        let mask = binarize(&Tensor::new(vec![1, h, w], pred.data.clone())?, BIN_THRESHOLD);
        let mask_path = out_dir.join(format!("{id}.pgm"));
        save_pgm(&mask, &mask_path)?;
        if let Some(edge) = edge {
            let e = Tensor::new(vec![1, h, w], edge.data.clone())?;
            save_pgm(&e, &out_dir.join(format!("{id}_edge.pgm")))?;
        }
        written.push(mask_path);
    }
    Ok(written)
}

// ---- gradient check ----------------------------------------------------------

pub struct GradcheckReport {
    pub checked: usize,
    pub failures: usize,
    pub worst_rel: f64,
    pub worst_param: String,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }

    pub fn summary(&self) -> String {
        format!(
            "gradcheck: {}/{} coordinates within tol {:.1e}; worst relative error {:.3e} at `{}`",
            self.checked - self.failures,
            self.checked,
            self.tolerance,
            self.worst_rel,
            self.worst_param
        )
    }
}

/// Central-difference step used by the gradient checks.
pub const FD_STEP: f64 = 1e-5;

/// Compares analytic gradients against central finite differences of
/// `loss_fn` on the listed `(name, flat_index)` coordinates. Relative error
/// uses `|ad - fd| / max(1, |fd|)`.
pub fn check_against_fd(
    loss_fn: &mut dyn FnMut(&ParamStore) -> Result<f64>,
    params: &ParamStore,
    grads: &BTreeMap<String, Tensor>,
    coords: &[(String, usize)],
    h: f64,
    tol: f64,
) -> Result<GradcheckReport> {
    let mut report = GradcheckReport {
        checked: 0,
        failures: 0,
        worst_rel: 0.0,
        worst_param: String::new(),
        tolerance: tol,
    };
    let mut work = params.clone();
    for (name, idx) in coords {
        let base = params.get(name)?.data[*idx];
        work.get_mut(name)?.data[*idx] = base + h;
        let plus = loss_fn(&work)?;
        work.get_mut(name)?.data[*idx] = base - h;
        let minus = loss_fn(&work)?;
        work.get_mut(name)?.data[*idx] = base;
        let fd = (plus - minus) / (2.0 * h);
        let ad = grads.get(name).map(|g| g.data[*idx]).unwrap_or(0.0);
        let rel = (ad - fd).abs() / fd.abs().max(1.0);
        report.checked += 1;
        if rel > report.worst_rel {
            report.worst_rel = rel;
            report.worst_param = format!("{name}[{idx}]");
        }
        if rel > tol {
            report.failures += 1;
        }
    }
    Ok(report)
}

/// Samples parameter coordinates uniformly over the flattened parameter
/// space and verifies the full-network loss gradient against central
/// differences (dropout disabled so the loss is deterministic).
pub fn gradcheck(cfg: &RunConfig, n_coords: usize, tol: f64) -> Result<GradcheckReport> {
    cfg.net.validate()?;
    let specs = param_specs(&cfg.net);
    let params = ParamStore::init_glorot(&specs, cfg.seed);
    let samples = synth_dataset(2, cfg.net.input_h, cfg.seed.wrapping_add(1));
    let refs: Vec<&Sample> = samples.iter().collect();
    let batch = make_batch(&refs, cfg.net.input_ch)?;

    let weights = cfg.weights;
    let mode = cfg.loss_mode;
    let net = cfg.net.clone();
    let mut loss_fn = move |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let image = tape.constant(batch.images.clone());
        let outs = msrfnet_forward(&mut tape, store, &net, image, false)?;
        let loss = total_loss(&mut tape, &outs, &batch.masks, &batch.edges, &weights, mode)?;
        tape.value(loss).item()
    };

    // Analytic gradients once.
    let samples2 = synth_dataset(2, cfg.net.input_h, cfg.seed.wrapping_add(1));
    let refs2: Vec<&Sample> = samples2.iter().collect();
    let batch2 = make_batch(&refs2, cfg.net.input_ch)?;
    let mut tape = Tape::new();
    let image = tape.constant(batch2.images.clone());
    let outs = msrfnet_forward(&mut tape, &params, &cfg.net, image, false)?;
    let loss = total_loss(&mut tape, &outs, &batch2.masks, &batch2.edges, &cfg.weights, cfg.loss_mode)?;
    let grads = tape.backward(loss)?.param_map(&tape);

    let total: usize = specs.iter().map(|s| s.numel()).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(2));
    let coords: Vec<(String, usize)> = (0..n_coords)
        .map(|_| {
            let mut flat = rng.gen_range(0..total);
            for s in &specs {
                if flat < s.numel() {
                    return (s.name.clone(), flat);
                }
                flat -= s.numel();
            }
            unreachable!("flat index within total")
        })
        .collect();

    check_against_fd(&mut loss_fn, &params, &grads, &coords, FD_STEP, tol)
}
