//! `panonerf` command-line interface.
//!
//! Failures print a single line `error kind=<kind> message="<text>"` to
//! stderr and exit with status 2 (usage) or 1 (everything else).

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{value_parser, Arg, ArgAction, ArgMatches, Command};
use thiserror::Error;

use panonerf_core::config::{DepthFormat, RunConfig, RESOLVED_CONFIG};
use panonerf_core::evaluation::{evaluate_view, EvalView, MetricReport};
use panonerf_core::field::{load_checkpoint, Checkpoint};
use panonerf_core::geometry::{CameraPose, Vec3};
use panonerf_core::io::{load_panorama, save_panorama};
use panonerf_core::rendering::{render_panorama, SamplingConfig};
use panonerf_core::reprojection::{generate_training_set, sample_virtual_poses};
use panonerf_core::scene::{synth_box_scene, BoxScene};
use panonerf_core::training::{checkpoint_path, TrainConfig, Trainer, FINAL_CHECKPOINT, METRICS_FILE};

#[derive(Debug, Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] panonerf_core::Error),
}

impl CliError {
    fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Core(e) => e.kind(),
        }
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(_) => 1,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn path_arg(name: &'static str, help: &'static str) -> Arg {
    Arg::new(name)
        .long(name)
        .value_name("PATH")
        .value_parser(value_parser!(PathBuf))
        .help(help)
}

fn depth_scale_arg() -> Arg {
    Arg::new("depth-scale")
        .long("depth-scale")
        .value_name("M")
        .value_parser(value_parser!(f64))
        .default_value("0.001")
        .help("meters per unit of a 16-bit PNG depth value")
}

fn sampling_args(cmd: Command) -> Command {
    cmd.arg(path_arg("config", "run config supplying sample counts and seeds"))
        .arg(
            Arg::new("n-coarse")
                .long("n-coarse")
                .value_parser(value_parser!(usize))
                .help("coarse samples per ray (default: from config)"),
        )
        .arg(
            Arg::new("n-fine")
                .long("n-fine")
                .value_parser(value_parser!(usize))
                .help("fine samples per ray (default: from config)"),
        )
}

fn cli() -> Command {
    let synth = Command::new("synth")
        .about("Render the analytic box room as an RGB-D panorama")
        .arg(path_arg("out", "output directory").required(true))
        .arg(path_arg("scene", "box scene TOML (default room when absent)"))
        .arg(Arg::new("width").long("width").value_parser(value_parser!(usize)).default_value("64"))
        .arg(Arg::new("height").long("height").value_parser(value_parser!(usize)).default_value("32"))
        .arg(
            Arg::new("depth-format")
                .long("depth-format")
                .value_parser(["pfm", "png16"])
                .default_value("pfm"),
        )
        .arg(depth_scale_arg());

    let reproject = Command::new("reproject")
        .about("Reproject an RGB-D panorama to virtual poses")
        .arg(path_arg("rgb", "input color PNG").required(true))
        .arg(path_arg("depth", "input depth (PFM or 16-bit PNG)").required(true))
        .arg(path_arg("mask", "optional input valid mask PNG"))
        .arg(depth_scale_arg())
        .arg(Arg::new("pose").long("pose").value_name("X,Y,Z").default_value("0,0,0").help("input capture position"))
        .arg(
            Arg::new("offset")
                .long("offset")
                .value_name("DX,DY,DZ")
                .action(ArgAction::Append)
                .help("explicit target offset from the input pose; repeatable"),
        )
        .arg(Arg::new("count").long("count").value_parser(value_parser!(usize)).default_value("8"))
        .arg(Arg::new("radius").long("radius").value_parser(value_parser!(f64)).default_value("0.3"))
        .arg(Arg::new("seed").long("seed").value_parser(value_parser!(u64)).default_value("1"))
        .arg(path_arg("out", "output directory").required(true));

    let mut train = Command::new("train")
        .about("Train a radiance field; every config key is also a flag")
        .arg(path_arg("config", "run config TOML"))
        .arg(path_arg("resume", "checkpoint to continue from"));
    for (key, default) in RunConfig::keys() {
        let help = if default.is_empty() {
            "config key (unset by default)".to_string()
        } else {
            format!("config key (default {default})")
        };
        train = train.arg(Arg::new(key.clone()).long(key).value_name("VALUE").help(help));
    }

    let render = sampling_args(
        Command::new("render")
            .about("Render a panorama from a checkpoint")
            .arg(path_arg("checkpoint", "trained checkpoint").required(true))
            .arg(Arg::new("pose").long("pose").value_name("X,Y,Z").default_value("0,0,0"))
            .arg(Arg::new("width").long("width").value_parser(value_parser!(usize)).default_value("64"))
            .arg(Arg::new("height").long("height").value_parser(value_parser!(usize)).default_value("32"))
            .arg(path_arg("out-rgb", "output color PNG").required(true))
            .arg(path_arg("out-depth", "output depth (PFM, or 16-bit PNG by extension)"))
            .arg(depth_scale_arg()),
    );

    let eval = sampling_args(
        Command::new("eval")
            .about("Score renders against reference panoramas")
            .arg(path_arg("checkpoint", "trained checkpoint").required(true))
            .arg(path_arg("frames", "directory written by `reproject`"))
            .arg(path_arg("rgb", "single reference color PNG"))
            .arg(path_arg("depth", "single reference depth"))
            .arg(path_arg("mask", "single reference valid mask"))
            .arg(Arg::new("pose").long("pose").value_name("X,Y,Z").default_value("0,0,0"))
            .arg(depth_scale_arg())
            .arg(path_arg("out", "CSV report path"))
            .arg(path_arg("renders", "directory for rendered views")),
    );

    Command::new("panonerf")
        .about("Radiance fields from a single RGB-D panorama")
        .subcommand_required(true)
        .subcommand(synth)
        .subcommand(reproject)
        .subcommand(train)
        .subcommand(render)
        .subcommand(eval)
}

fn parse_vec3(s: &str) -> Result<Vec3> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| CliError::Usage(format!("expected X,Y,Z but got `{s}`")))?;
    match parts[..] {
        [x, y, z] => Ok(Vec3::new(x, y, z)),
        _ => Err(CliError::Usage(format!("expected three components in `{s}`"))),
    }
}

fn pose_arg(m: &ArgMatches, name: &str) -> Result<CameraPose> {
    Ok(CameraPose::new(parse_vec3(m.get_one::<String>(name).expect("has default"))?)?)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| {
        CliError::Core(panonerf_core::Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| {
        CliError::Core(panonerf_core::Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    })
}

fn cmd_synth(m: &ArgMatches) -> Result<()> {
    let out = m.get_one::<PathBuf>("out").unwrap();
    let scene = match m.get_one::<PathBuf>("scene") {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| {
                CliError::Core(panonerf_core::Error::Io {
                    path: p.clone(),
                    source: e,
                })
            })?;
            toml::from_str::<BoxScene>(&text)
                .map_err(|e| panonerf_core::Error::Config(format!("{}: {}", p.display(), e.message())))?
        }
        None => BoxScene::default(),
    };
    let (w, h) = (*m.get_one::<usize>("width").unwrap(), *m.get_one::<usize>("height").unwrap());
    let pano = synth_box_scene(&scene, w, h)?;
    create_dir(out)?;
    let ext = if m.get_one::<String>("depth-format").unwrap() == "pfm" { "pfm" } else { "png" };
    let depth = out.join(format!("depth.{ext}"));
    save_panorama(&pano, out.join("rgb.png"), &depth, *m.get_one::<f64>("depth-scale").unwrap(), None)?;
    let scene_text = toml::to_string(&scene).map_err(|e| panonerf_core::Error::Config(e.to_string()))?;
    write_text(&out.join("scene.toml"), &scene_text)?;
    let c = scene.camera;
    println!(
        "synth: wrote {}x{} panorama to {} (camera {},{},{})",
        w,
        h,
        out.display(),
        c.x,
        c.y,
        c.z
    );
    Ok(())
}

fn cmd_reproject(m: &ArgMatches) -> Result<()> {
    let scale = *m.get_one::<f64>("depth-scale").unwrap();
    let input = load_panorama(
        m.get_one::<PathBuf>("rgb").unwrap(),
        m.get_one::<PathBuf>("depth").unwrap(),
        scale,
        m.get_one::<PathBuf>("mask").map(PathBuf::as_path),
    )?;
    let pose = pose_arg(m, "pose")?;
    let poses = match m.get_many::<String>("offset") {
        Some(offsets) => offsets
            .map(|o| Ok(CameraPose::new(pose.position + parse_vec3(o)?)?))
            .collect::<Result<Vec<_>>>()?,
        None => sample_virtual_poses(
            &pose,
            *m.get_one::<usize>("count").unwrap(),
            *m.get_one::<f64>("radius").unwrap(),
            *m.get_one::<u64>("seed").unwrap(),
        )?,
    };
    let frames = generate_training_set(&input, &pose, &poses)?;
    let out = m.get_one::<PathBuf>("out").unwrap();
    create_dir(out)?;
    let mut index = String::from("frame,x,y,z,valid_fraction\n");
    for (i, f) in frames.iter().enumerate() {
        let name = format!("frame_{i:03}");
        let dir = out.join(&name);
        create_dir(&dir)?;
        save_panorama(&f.pano, dir.join("rgb.png"), dir.join("depth.pfm"), scale, Some(&dir.join("mask.png")))?;
        let p = f.pose.position;
        index.push_str(&format!("{name},{},{},{},{:.6}\n", p.x, p.y, p.z, f.pano.valid_fraction()));
    }
    write_text(&out.join("poses.csv"), &index)?;
    println!("reproject: wrote {} frames to {}", frames.len(), out.display());
    Ok(())
}

fn cmd_train(m: &ArgMatches) -> Result<()> {
    let mut cfg = match m.get_one::<PathBuf>("config") {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for (key, _) in RunConfig::keys() {
        if let Some(v) = m.get_one::<String>(&key) {
            cfg.set(&key, v)?;
        }
    }
    cfg.check_paths()?;
    let input = load_panorama(&cfg.input.rgb, &cfg.input.depth, cfg.input.depth_scale, cfg.input.mask.as_deref())?;
    let out = cfg.output.dir.clone();
    create_dir(&out)?;
    cfg.save(out.join(RESOLVED_CONFIG))?;
    let mut trainer = Trainer::new(&input, cfg.input_pose()?, cfg.train.clone())?;
    if let Some(p) = m.get_one::<PathBuf>("resume") {
        trainer.resume(&load_checkpoint(p)?)?;
    }
    trainer.run(Some(&out))?;
    let last = trainer.log().last();
    println!(
        "train: iter={} color_loss={} geo_loss={} total={} checkpoint={} metrics={}",
        trainer.iteration(),
        last.map_or(f64::NAN, |r| r.color_loss),
        last.map_or(f64::NAN, |r| r.geo_loss),
        last.map_or(f64::NAN, |r| r.total),
        out.join(FINAL_CHECKPOINT).display(),
        out.join(METRICS_FILE).display()
    );
    if trainer.iteration() == 0 {
        println!("train: no iterations run; initial checkpoint at {}", checkpoint_path(&out, 0).display());
    }
    Ok(())
}

/// Deterministic sampling for renders of a checkpoint.
fn sampling_for(m: &ArgMatches, ckpt: &Checkpoint) -> Result<SamplingConfig> {
    let train = match m.get_one::<PathBuf>("config") {
        Some(p) => RunConfig::load(p)?.train,
        None => TrainConfig::default(),
    };
    let mut s = train.sampling(ckpt.near as f64, ckpt.far as f64).deterministic();
    if let Some(n) = m.get_one::<usize>("n-coarse") {
        s.n_coarse = *n;
    }
    if let Some(n) = m.get_one::<usize>("n-fine") {
        s.n_fine = *n;
    }
    s.validate()?;
    Ok(s)
}

fn cmd_render(m: &ArgMatches) -> Result<()> {
    let ckpt = load_checkpoint(m.get_one::<PathBuf>("checkpoint").unwrap())?;
    let cfg = sampling_for(m, &ckpt)?;
    let pose = pose_arg(m, "pose")?;
    let (w, h) = (*m.get_one::<usize>("width").unwrap(), *m.get_one::<usize>("height").unwrap());
    let pano = render_panorama(&ckpt.params, &pose, w, h, &cfg)?;
    let rgb = m.get_one::<PathBuf>("out-rgb").unwrap();
    panonerf_core::io::write_rgb_png(rgb, w, h, pano.rgb())?;
    if let Some(d) = m.get_one::<PathBuf>("out-depth") {
        panonerf_core::io::write_depth(d, w, h, pano.depth(), *m.get_one::<f64>("depth-scale").unwrap())?;
    }
    println!("render: wrote {}x{} view at iteration {} to {}", w, h, ckpt.iteration, rgb.display());
    Ok(())
}

fn read_frames_dir(dir: &Path, scale: f64) -> Result<Vec<EvalView>> {
    let index = dir.join("poses.csv");
    let text = fs::read_to_string(&index).map_err(|e| {
        CliError::Core(panonerf_core::Error::Io {
            path: index.clone(),
            source: e,
        })
    })?;
    let mut views = Vec::new();
    for line in text.lines().skip(1).filter(|l| !l.trim().is_empty()) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() < 4 {
            return Err(panonerf_core::Error::Format(format!("{}: bad line `{line}`", index.display())).into());
        }
        let pose = CameraPose::new(parse_vec3(&f[1..4].join(","))?)?;
        let fd = dir.join(f[0]);
        let reference = load_panorama(fd.join("rgb.png"), fd.join("depth.pfm"), scale, Some(&fd.join("mask.png")))?;
        views.push(EvalView {
            name: f[0].to_string(),
            pose,
            reference,
        });
    }
    Ok(views)
}

fn cmd_eval(m: &ArgMatches) -> Result<()> {
    let ckpt = load_checkpoint(m.get_one::<PathBuf>("checkpoint").unwrap())?;
    let cfg = sampling_for(m, &ckpt)?;
    let scale = *m.get_one::<f64>("depth-scale").unwrap();
    let views = match (m.get_one::<PathBuf>("frames"), m.get_one::<PathBuf>("rgb"), m.get_one::<PathBuf>("depth")) {
        (Some(dir), None, None) => read_frames_dir(dir, scale)?,
        (None, Some(rgb), Some(depth)) => vec![EvalView {
            name: "input".into(),
            pose: pose_arg(m, "pose")?,
            reference: load_panorama(rgb, depth, scale, m.get_one::<PathBuf>("mask").map(PathBuf::as_path))?,
        }],
        _ => return Err(CliError::Usage("give either --frames or both --rgb and --depth".into())),
    };
    let renders_dir = m.get_one::<PathBuf>("renders");
    if let Some(d) = renders_dir {
        create_dir(d)?;
    }
    let mut rows = Vec::new();
    for view in &views {
        let (render, metrics) = evaluate_view(&ckpt.params, view, &cfg)?;
        if let Some(d) = renders_dir {
            save_panorama(
                &render,
                d.join(format!("{}_rgb.png", view.name)),
                d.join(format!("{}_depth.{}", view.name, DepthFormat::Pfm.extension())),
                scale,
                None,
            )?;
        }
        rows.push(metrics);
    }
    let report = MetricReport { views: rows };
    print!("{}", report.to_table());
    if let Some(out) = m.get_one::<PathBuf>("out") {
        write_text(out, &report.to_csv())?;
    }
    Ok(())
}

fn run() -> Result<()> {
    let matches = cli()
        .try_get_matches()
        .map_err(|e| match e.kind() {
            clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
                let _ = e.print();
                std::process::exit(0);
            }
            _ => CliError::Usage(e.to_string().lines().next().unwrap_or("").trim_start_matches("error: ").to_string()),
        })?;
    match matches.subcommand() {
        Some(("synth", m)) => cmd_synth(m),
        Some(("reproject", m)) => cmd_reproject(m),
        Some(("train", m)) => cmd_train(m),
        Some(("render", m)) => cmd_render(m),
        Some(("eval", m)) => cmd_eval(m),
        _ => Err(CliError::Usage("missing subcommand".into())),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ").replace('"', "'");
            eprintln!("error kind={} message=\"{msg}\"", e.kind());
            ExitCode::from(e.exit_code())
        }
    }
}
