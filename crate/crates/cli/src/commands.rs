use std::fs;
use std::path::{Path, PathBuf};

use cpf_core::autograd::BackwardFault;
use cpf_core::data::{
    read_features, read_splits, read_word_table, synth_generate, write_features, write_splits,
    write_word_table, Checkpoint, FeatureFileHeader, SynthConfig, WordTable,
};
use cpf_core::eval::{build_score_table, linear_bias_grid, EvalReport};
use cpf_core::gradcheck::{check_model, ModelCheckConfig};
use cpf_core::training::{select_blocks, train as train_head, TrainConfig};
use cpf_core::{CompositionSpace, FeatureBundle, Setting, TextEmbeddings, Variant};

use crate::config::RunConfig;
use crate::{CliError, EvalArgs, GradcheckArgs, SynthArgs, TrainArgs};

pub const TRAIN_FILE: &str = "train.cpff";
pub const VAL_FILE: &str = "val.cpff";
pub const TEST_FILE: &str = "test.cpff";
pub const TEXT_FILE: &str = "text.cpft";
pub const SPLITS_FILE: &str = "splits.txt";
pub const CHECKPOINT_FILE: &str = "checkpoint.cpfc";
pub const STEP_LOG_FILE: &str = "train_log.txt";
pub const EPOCH_LOG_FILE: &str = "epochs.txt";

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

fn with_path(path: &Path) -> impl Fn(cpf_core::Error) -> CliError + '_ {
    move |e| match CliError::from(e) {
        CliError::Data(m) => CliError::Data(format!("{}: {m}", path.display())),
        other => other,
    }
}

fn prepare_out_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let probe = dir.join(".cpf-write-test");
    fs::write(&probe, b"").map_err(|e| io_err(dir, format!("not writable: {e}")))?;
    let _ = fs::remove_file(probe);
    Ok(())
}

fn require_files(dir: &Path, names: &[&str]) -> Result<(), CliError> {
    for n in names {
        let p = dir.join(n);
        if !p.is_file() {
            return Err(CliError::Usage(format!("missing input file {}", p.display())));
        }
    }
    Ok(())
}

pub const SYNTH_KEYS: [&str; 16] = [
    "out", "M", "N", "seen_frac", "seed", "samples", "kappa", "sigma", "D", "d", "T", "B", "foreground",
    "distractor", "scale", "text_scale",
];

pub fn synth(a: SynthArgs) -> Result<(), CliError> {
    let rc = RunConfig::resolve(
        a.config.as_deref(),
        vec![
            ("out", a.out),
            ("M", a.m),
            ("N", a.n),
            ("seen_frac", a.seen_frac),
            ("seed", a.seed),
            ("samples", a.samples),
            ("kappa", a.kappa),
            ("sigma", a.sigma),
            ("D", a.visual_dim),
            ("d", a.text_dim),
            ("T", a.tokens),
            ("B", a.blocks),
            ("foreground", a.foreground),
            ("distractor", a.distractor),
            ("scale", a.scale),
            ("text_scale", a.text_scale),
        ],
        &SYNTH_KEYS,
    )?;
    let out = rc.path("out")?;
    let mut c = SynthConfig::default();
    macro_rules! set {
        ($key:literal, $field:ident) => {
            if let Some(v) = rc.parse($key)? {
                c.$field = v;
            }
        };
    }
    set!("M", num_attrs);
    set!("N", num_objs);
    set!("seen_frac", seen_fraction);
    set!("seed", seed);
    set!("samples", samples_per_composition);
    set!("kappa", dependence);
    set!("sigma", noise);
    set!("D", visual_dim);
    set!("d", text_dim);
    set!("T", tokens);
    set!("B", blocks);
    set!("foreground", foreground);
    set!("distractor", distractor_deep);
    set!("text_scale", text_scale);
    if let Some(s) = rc.parse::<f64>("scale")? {
        c.scale = Some(s);
    }
    c.validate()?;
    prepare_out_dir(&out)?;

    let data = synth_generate(&c)?;
    let header = |count: usize| {
        FeatureFileHeader::new(c.visual_dim, c.tokens, c.blocks, c.text_dim, c.num_attrs, c.num_objs, count)
    };
    for (name, set) in [(TRAIN_FILE, &data.train), (VAL_FILE, &data.val), (TEST_FILE, &data.test)] {
        let p = out.join(name);
        write_features(&p, &header(set.len()), set).map_err(with_path(&p))?;
    }
    let p = out.join(TEXT_FILE);
    write_word_table(&p, &WordTable::from_embeddings(&data.text)?).map_err(with_path(&p))?;
    let p = out.join(SPLITS_FILE);
    write_splits(&p, &data.space).map_err(with_path(&p))?;

    let s = &data.space;
    println!("compositions: {} seen, {} unseen (val {}, test {})",
        s.train_seen.len(),
        s.val_unseen.len() + s.test_unseen.len(),
        s.val_unseen.len(),
        s.test_unseen.len()
    );
    println!("images: train {}, val {}, test {}", data.train.len(), data.val.len(), data.test.len());
    println!("wrote {}", out.display());
    Ok(())
}

struct Dataset {
    space: CompositionSpace,
    text: TextEmbeddings,
}

fn load_dataset(dir: &Path) -> Result<Dataset, CliError> {
    let sp = dir.join(SPLITS_FILE);
    let space = read_splits(&sp).map_err(with_path(&sp))?;
    let tp = dir.join(TEXT_FILE);
    let table = read_word_table(&tp).map_err(with_path(&tp))?;
    let text = table
        .embeddings(&space.attributes, &space.objects)
        .map_err(with_path(&tp))?;
    Ok(Dataset { space, text })
}

fn load_split(path: &Path, data: &Dataset) -> Result<Vec<FeatureBundle>, CliError> {
    let (h, bundles) = read_features(path).map_err(with_path(path))?;
    if h.text_dim as usize != data.text.dim() {
        return Err(CliError::Data(format!(
            "{}: header text width {} but the word table has {}",
            path.display(),
            h.text_dim,
            data.text.dim()
        )));
    }
    if h.num_attrs as usize != data.space.num_attrs() || h.num_objs as usize != data.space.num_objs() {
        return Err(CliError::Data(format!(
            "{}: header vocabulary {}x{} but the split file has {}x{}",
            path.display(),
            h.num_attrs,
            h.num_objs,
            data.space.num_attrs(),
            data.space.num_objs()
        )));
    }
    Ok(bundles)
}

pub fn train(a: TrainArgs) -> Result<(), CliError> {
    let mut allowed = vec!["data", "out"];
    allowed.extend(TrainConfig::KEYS);
    let rc = RunConfig::resolve(
        a.config.as_deref(),
        vec![
            ("data", a.data),
            ("out", a.out),
            ("epochs", a.epochs),
            ("lr", a.lr),
            ("decay_factor", a.decay_factor),
            ("decay_epoch", a.decay_epoch),
            ("batch_size", a.batch_size),
            ("seed", a.seed),
            ("tau", a.tau),
            ("alpha1", a.alpha1),
            ("alpha2", a.alpha2),
            ("variant", a.variant),
            ("blocks", a.blocks),
            ("log_every", a.log_every),
            ("full_train_softmax", a.full_train_softmax),
        ],
        &allowed,
    )?;
    let data_dir = rc.path("data")?;
    let out = rc.path("out")?;
    let mut cfg = TrainConfig::default();
    for (k, v) in rc.entries() {
        if k != "data" && k != "out" {
            cfg.set(k, v)?;
        }
    }
    cfg.validate()?;
    require_files(&data_dir, &[TRAIN_FILE, TEXT_FILE, SPLITS_FILE])?;
    prepare_out_dir(&out)?;

    let data = load_dataset(&data_dir)?;
    let train_set = load_split(&data_dir.join(TRAIN_FILE), &data)?;
    let trained = train_head(&train_set, &data.text, &data.space, &cfg)?;
    let ck = Checkpoint::new(trained.params, trained.optimizer, cfg)?;
    let p = out.join(CHECKPOINT_FILE);
    ck.save(&p).map_err(with_path(&p))?;
    let p = out.join(STEP_LOG_FILE);
    fs::write(&p, trained.log.to_text()).map_err(|e| io_err(&p, e))?;
    let p = out.join(EPOCH_LOG_FILE);
    fs::write(&p, trained.log.epochs_text()).map_err(|e| io_err(&p, e))?;

    let (i, l) = (trained.log.initial, trained.log.last);
    println!("images {}, steps {}", train_set.len(), ck.optimizer.step);
    println!("L_total {:.6} -> {:.6}", i.total, l.total);
    println!("L_com {:.6} -> {:.6}, L_att {:.6} -> {:.6}, L_obj {:.6} -> {:.6}", i.comp, l.comp, i.attr, l.attr, i.obj, l.obj);
    println!("wrote {}", out.display());
    Ok(())
}

fn threads(rc: &RunConfig) -> Result<usize, CliError> {
    let n = match rc.parse::<usize>("threads")? {
        Some(n) => n,
        None => match std::env::var("CPF_THREADS") {
            Ok(v) => v
                .trim()
                .parse()
                .map_err(|_| CliError::Usage(format!("CPF_THREADS: cannot parse {v:?}")))?,
            Err(_) => 1,
        },
    };
    if n == 0 {
        return Err(CliError::Usage("--threads must be at least 1".into()));
    }
    Ok(n)
}

pub fn eval(a: EvalArgs) -> Result<(), CliError> {
    let rc = RunConfig::resolve(
        a.config.as_deref(),
        vec![
            ("data", a.data),
            ("checkpoint", a.checkpoint),
            ("setting", a.setting),
            ("bias_grid", a.bias_grid),
            ("threads", a.threads),
            ("out", a.out),
        ],
        &["data", "checkpoint", "setting", "bias_grid", "threads", "out"],
    )?;
    let data_dir = rc.path("data")?;
    let ck_path = rc.path("checkpoint")?;
    let setting: Setting = rc.parse("setting")?.unwrap_or(Setting::ClosedWorld);
    let grid_points: Option<usize> = rc.parse("bias_grid")?;
    if grid_points == Some(0) {
        return Err(CliError::Usage("--bias-grid needs at least one point".into()));
    }
    let threads = threads(&rc)?;
    let out: PathBuf = match rc.get("out") {
        Some(p) => p.into(),
        None => ck_path
            .parent()
            .unwrap_or(Path::new("."))
            .join(format!("report_{}.txt", setting.as_str())),
    };
    require_files(&data_dir, &[TEST_FILE, TEXT_FILE, SPLITS_FILE])?;
    if !ck_path.is_file() {
        return Err(CliError::Usage(format!("missing checkpoint {}", ck_path.display())));
    }

    let ck = Checkpoint::load(&ck_path).map_err(with_path(&ck_path))?;
    let data = load_dataset(&data_dir)?;
    let test = load_split(&data_dir.join(TEST_FILE), &data)?;
    let test = select_blocks(&test, ck.config.shallow_blocks.as_deref())?;
    let table = build_score_table(&test, &ck.params, &data.text, &data.space, setting, threads)?;
    let grid = grid_points.map(|k| linear_bias_grid(&table, k));
    let report = EvalReport::from_table(setting, &table, grid.as_deref());
    fs::write(&out, report.to_text()).map_err(|e| io_err(&out, e))?;

    println!(
        "setting {}: {} candidates, {} images ({} seen, {} unseen)",
        setting.as_str(),
        report.candidates,
        report.images,
        report.seen_images,
        report.unseen_images
    );
    println!("AUC, HM, Seen, Unseen");
    println!("{}", report.summary_line());
    println!("wrote {}", out.display());
    Ok(())
}

pub fn gradcheck(a: GradcheckArgs) -> Result<(), CliError> {
    let rc = RunConfig::resolve(
        a.config.as_deref(),
        vec![
            ("seeds", a.seeds),
            ("seed", a.seed),
            ("eps", a.eps),
            ("inject_fault", a.inject_fault),
        ],
        &["seeds", "seed", "eps", "inject_fault"],
    )?;
    let seeds: u64 = rc.parse("seeds")?.unwrap_or(20);
    let first: u64 = rc.parse("seed")?.unwrap_or(0);
    let eps: f64 = rc.parse("eps")?.unwrap_or(1e-5);
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(CliError::Usage(format!("--eps must lie in [1e-7, 1e-3], got {eps}")));
    }
    let fault = match rc.get("inject_fault") {
        None | Some("none") => None,
        Some("softmax-jacobian") => Some(BackwardFault::SoftmaxJacobian),
        Some(other) => {
            return Err(CliError::Usage(format!(
                "--inject-fault: unknown fault {other:?}, expected softmax-jacobian"
            )))
        }
    };
    let cfg = ModelCheckConfig {
        eps,
        fault,
        ..ModelCheckConfig::default()
    };
    let variants = [Variant::Full, Variant::NoTextObject, Variant::NoTextObjectNoGuidance];
    let report = check_model(&cfg, &variants, first..first + seeds)?;
    print!("{}", report.to_text());
    if report.passed() {
        Ok(())
    } else {
        let failing = report
            .rows
            .iter()
            .filter(|r| r.max_rel_error >= report.tolerance)
            .map(|r| format!("{}/{}/{} seed {} ({:.3e})", r.variant.as_str(), r.loss, r.param, r.seed, r.max_rel_error))
            .take(10)
            .collect::<Vec<_>>()
            .join(", ");
        Err(CliError::Failed(format!("gradient check failed: {failing}")))
    }
}
