use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use priorfield::guidance::fixture::{FixtureServer, Scorer};
use priorfield::guidance::{PhotometricViews, RemoteConfig};
use priorfield::optimizer::{run as run_steps, Checkpointer, Observer};
use priorfield::sdf_prior::DEFAULT_BETA;
use priorfield::{
    render, Camera, FieldConfig, GuidanceHandle, Lattice, LossBreakdown, OptimConfig, OptimState, RemoteGuidance,
    RenderSettings, SdfGrid, VoxelField,
};
use serde_json::{json, Value};

use crate::error::{usage, CliResult};
use crate::files::{read_json, unix_time, write_json_atomic, write_png};

pub const ENDPOINT_ENV: &str = "PRIORFIELD_GUIDANCE_ENDPOINT";
pub const SNAPSHOT_AZIMUTHS: [f64; 4] = [0.0, 90.0, 180.0, 270.0];
pub const SNAPSHOT_ELEVATION: f64 = 25.0;

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GuidanceKind {
    /// MSE against views rendered from --target.
    Photometric,
    /// HTTP guidance service scoring renders against --prompt.
    Remote,
}

#[derive(Args)]
pub struct OptimizeArgs {
    /// Run directory for the checkpoint, metrics, snapshots and manifest.
    #[arg(long)]
    out: PathBuf,
    /// JSON optimizer config; flags below override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    guidance: GuidanceKind,
    /// SDFG shape whose rendered views are the photometric targets.
    #[arg(long)]
    target: Option<PathBuf>,
    /// Number of photometric target views on a ring around the object.
    #[arg(long, default_value_t = 8)]
    views: usize,
    /// Guidance service base URL.
    #[arg(long, env = ENDPOINT_ENV)]
    endpoint: Option<String>,
    /// Text prompt for remote guidance.
    #[arg(long)]
    prompt: Option<String>,
    /// Serve zero loss and gradient from an in-process protocol stub instead
    /// of contacting --endpoint.
    #[arg(long)]
    stub: bool,
    /// SDFG shape prior: initializes the field and anchors the prior loss.
    #[arg(long)]
    prior: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_BETA)]
    beta: f64,
    #[arg(long, default_value_t = 1e-6)]
    alpha_init: f64,
    /// Voxels per axis of a transparent start (without --prior).
    #[arg(long, default_value_t = 64)]
    dims: usize,
    /// A transparent start spans [-extent, extent] on every axis.
    #[arg(long, default_value_t = 1.0)]
    extent: f64,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr_grid: Option<f64>,
    #[arg(long)]
    lr_mlp: Option<f64>,
    #[arg(long)]
    checkpoint_every: Option<u64>,
    /// Render the four snapshot poses every this many steps (0: only at the end).
    #[arg(long, default_value_t = 500)]
    snapshot_every: u64,
    /// Continue from the checkpoint in --out up to the configured step count.
    #[arg(long)]
    resume: bool,
}

fn snapshot_cameras(config: &OptimConfig) -> CliResult<Vec<Camera>> {
    let c = &config.camera;
    Ok(SNAPSHOT_AZIMUTHS
        .iter()
        .map(|&az| Camera::orbit(az, SNAPSHOT_ELEVATION, c.radius, c.fov_y_deg, c.width, c.height))
        .collect::<Result<_, _>>()?)
}

/// Metrics lines plus periodic snapshots.
struct RunObserver {
    metrics: BufWriter<File>,
    snapshot_every: u64,
    cameras: Vec<Camera>,
    settings: RenderSettings,
    dir: PathBuf,
    snapshots: Vec<PathBuf>,
    snapshot_step: Option<u64>,
    last: Option<(u64, LossBreakdown)>,
}

impl RunObserver {
    fn snapshot(&mut self, field: &VoxelField, step: u64) -> priorfield::Result<()> {
        for (cam, az) in self.cameras.iter().zip(SNAPSHOT_AZIMUTHS) {
            let path = self.dir.join(format!("step_{step:06}_az{:03}.png", az as u32));
            write_png(&path, &render(field, cam, &self.settings)?.rgb)?;
            self.snapshots.push(path);
        }
        self.snapshot_step = Some(step);
        Ok(())
    }
}

impl Observer for RunObserver {
    fn on_step(&mut self, step: u64, loss: &LossBreakdown, state: &OptimState) -> priorfield::Result<()> {
        writeln!(self.metrics, "{}", loss.json_line(step))?;
        self.metrics.flush()?;
        self.last = Some((step, *loss));
        if self.snapshot_every > 0 && state.step() % self.snapshot_every == 0 {
            self.snapshot(&state.field, state.step())?;
        }
        Ok(())
    }
}

fn target_views(target: &SdfGrid, n: usize, args: &OptimizeArgs, config: &OptimConfig) -> CliResult<PhotometricViews> {
    if n == 0 {
        return Err(usage("--views must be at least 1"));
    }
    let cfg = FieldConfig {
        seed: config.seed,
        ..FieldConfig::default()
    };
    let truth = VoxelField::init_from_prior(target, args.beta, args.alpha_init, &cfg)?;
    let c = &config.camera;
    let settings = RenderSettings {
        jitter: false,
        ..config.render.clone()
    };
    let mut views = Vec::with_capacity(n);
    for i in 0..n {
        let az = 360.0 * i as f64 / n as f64;
        let el = c.elevation_deg[i % 2];
        let cam = Camera::orbit(az, el, c.radius, c.fov_y_deg, c.width, c.height)?;
        let img = render(&truth, &cam, &settings)?.rgb;
        views.push((cam, img));
    }
    Ok(PhotometricViews::new(views)?)
}

fn load_config(args: &OptimizeArgs) -> CliResult<OptimConfig> {
    let mut config: OptimConfig = match &args.config {
        Some(p) => read_json(p)?,
        None => OptimConfig::default(),
    };
    if let Some(v) = args.steps {
        config.steps = v;
    }
    if let Some(v) = args.seed {
        config.seed = v;
    }
    if let Some(v) = args.lr_grid {
        config.lr_grid = v;
    }
    if let Some(v) = args.lr_mlp {
        config.lr_mlp = v;
    }
    if let Some(v) = args.checkpoint_every {
        config.checkpoint_every = v;
    }
    Ok(config)
}

pub fn run(args: OptimizeArgs) -> CliResult {
    let started = unix_time();
    let mut config = load_config(&args)?;
    let prior = args.prior.as_deref().map(SdfGrid::load).transpose()?;
    if prior.is_none() && config.weights.w_prior > 0.0 {
        eprintln!("note: no --prior given, disabling the prior-preserving loss");
        config.weights.w_prior = 0.0;
    }
    config.validate()?;

    // Keeps the stub server alive for the whole run.
    let mut _stub = None;
    let (mut guidance, guidance_info) = match args.guidance {
        GuidanceKind::Photometric => {
            let path = args
                .target
                .as_deref()
                .ok_or_else(|| usage("--guidance photometric needs --target"))?;
            let views = target_views(&SdfGrid::load(path)?, args.views, &args, &config)?;
            let info = json!({"kind": "photometric", "target": path, "views": args.views});
            (GuidanceHandle::Photometric(views), info)
        }
        GuidanceKind::Remote => {
            let prompt = args.prompt.clone().ok_or_else(|| usage("--guidance remote needs --prompt"))?;
            let endpoint = if args.stub {
                let server = FixtureServer::start(Scorer::Stub)?;
                let e = server.endpoint().to_string();
                _stub = Some(server);
                e
            } else {
                args.endpoint
                    .clone()
                    .ok_or_else(|| usage(format!("--guidance remote needs --endpoint or {ENDPOINT_ENV}")))?
            };
            let client = RemoteGuidance::new(RemoteConfig {
                endpoint: endpoint.clone(),
                ..RemoteConfig::default()
            })?;
            let info = json!({"kind": "remote", "prompt": prompt, "endpoint": endpoint, "stub": args.stub});
            (GuidanceHandle::Remote { client, prompt }, info)
        }
    };

    let field_config = FieldConfig {
        seed: config.seed,
        ..FieldConfig::default()
    };
    fs::create_dir_all(&args.out)?;
    let checkpoint = args.out.join("field.vfld");
    let mut state = if args.resume {
        OptimState::load(&checkpoint)?
    } else {
        let field = match &prior {
            Some(sdf) => VoxelField::init_from_prior(sdf, args.beta, args.alpha_init, &field_config)?,
            None => VoxelField::init_transparent(
                Lattice::centered_cube(args.dims, args.extent)?,
                args.alpha_init,
                &field_config,
            )?,
        };
        OptimState::new(field)
    };
    let start_step = state.step();

    let snapshot_dir = args.out.join("snapshots");
    fs::create_dir_all(&snapshot_dir)?;
    let metrics_path = args.out.join("metrics.jsonl");
    let metrics = OpenOptions::new()
        .create(true)
        .write(true)
        .append(args.resume)
        .truncate(!args.resume)
        .open(&metrics_path)?;
    let mut observer = (
        RunObserver {
            metrics: BufWriter::new(metrics),
            snapshot_every: args.snapshot_every,
            cameras: snapshot_cameras(&config)?,
            settings: RenderSettings {
                jitter: false,
                ..config.render.clone()
            },
            dir: snapshot_dir,
            snapshots: Vec::new(),
            snapshot_step: None,
            last: None,
        },
        Checkpointer {
            path: checkpoint.clone(),
            every: config.checkpoint_every,
        },
    );

    let result = run_steps(&mut state, &mut guidance, prior.as_ref(), &config, &mut observer);
    let result = result.and_then(|()| {
        state.save(&checkpoint)?;
        let obs = &mut observer.0;
        if obs.snapshot_step != Some(state.step()) {
            obs.snapshot(&state.field, state.step())?;
        }
        Ok(())
    });

    let obs = &observer.0;
    let manifest = json!({
        "command": "optimize",
        "status": if result.is_ok() { "completed" } else { "failed" },
        "error": result.as_ref().err().map(|e| e.to_string()),
        "seed": config.seed,
        "config": config,
        "field_config": {
            "hidden_widths": field_config.hidden_widths,
            "encoding_levels": field_config.encoding_levels,
            "seed": field_config.seed,
        },
        "guidance": guidance_info,
        "prior": args.prior,
        "beta": args.beta,
        "alpha_init": args.alpha_init,
        "resumed_from_step": if args.resume { Some(start_step) } else { None },
        "steps_completed": state.step(),
        "checkpoint": checkpoint,
        "optimizer_state": priorfield::optimizer::sidecar_path(&checkpoint),
        "metrics": metrics_path,
        "snapshots": obs.snapshots,
        "final_metrics": obs.last.as_ref().and_then(|(s, l)| serde_json::from_str::<Value>(&l.json_line(*s)).ok()),
        "started_at": started,
        "finished_at": unix_time(),
    });
    write_json_atomic(&args.out.join("manifest.json"), &manifest)?;
    result?;
    summarize(&args.out, &state, obs.last.as_ref());
    Ok(())
}

fn summarize(dir: &Path, state: &OptimState, last: Option<&(u64, LossBreakdown)>) {
    match last {
        Some((_, l)) => println!(
            "{}: {} steps, final total loss {:.6}",
            dir.display(),
            state.step(),
            l.total
        ),
        None => println!("{}: {} steps, nothing to do", dir.display(), state.step()),
    }
}
