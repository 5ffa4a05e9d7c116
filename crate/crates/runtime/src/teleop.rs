//! Live teleoperation: one simulated robot stepped in real time, driven by
//! WebSocket clients.
//!
//! The simulation task is the only writer. Commands from any client replace
//! the shared setpoint (last writer wins) and take effect at the next control
//! tick. Each connection samples the latest snapshot on its own 20 Hz timer.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::response::IntoResponse;
use axum::routing::get;
use axum::Router;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tokio::net::TcpListener;
use tokio::sync::watch;
use wheelgait::env::{Env, EnvConfig, Pilot};
use wheelgait::gait::{GaitId, VelocityCommand};
use wheelgait::trainer::CommandRanges;

use crate::protocol::{parse_command, ServerMessage, StateSnapshot};

#[derive(Debug, Clone)]
pub struct TeleopConfig {
    pub env: EnvConfig,
    pub control_period: Duration,
    pub snapshot_period: Duration,
    pub commands: CommandRanges,
    pub seed: u64,
}

impl Default for TeleopConfig {
    fn default() -> Self {
        Self {
            env: EnvConfig::default(),
            control_period: Duration::from_millis(20),
            snapshot_period: Duration::from_millis(50),
            commands: CommandRanges::default(),
            seed: 0,
        }
    }
}

#[derive(Clone)]
struct AppState {
    command: Arc<watch::Sender<VelocityCommand>>,
    snapshot: watch::Receiver<Arc<str>>,
    clients: Arc<AtomicUsize>,
    snapshot_period: Duration,
    ranges: CommandRanges,
}

/// Serve until the returned future is dropped or the listener fails.
pub async fn serve(listener: TcpListener, pilot: Pilot, cfg: TeleopConfig) -> std::io::Result<()> {
    let env_cfg = EnvConfig {
        // The session never times out; falls restart in place.
        episode_length: f64::INFINITY,
        ..cfg.env.clone()
    };
    let env = Env::new(env_cfg);
    let initial = ServerMessage::State(StateSnapshot::capture(&env, &[0.0; 3], 0.0)).to_json();
    let (command_tx, command_rx) = watch::channel(VelocityCommand::ZERO);
    let (snapshot_tx, snapshot_rx) = watch::channel::<Arc<str>>(initial.into());
    tokio::spawn(simulation_loop(env, pilot, cfg.clone(), command_rx, snapshot_tx));

    let state = AppState {
        command: Arc::new(command_tx),
        snapshot: snapshot_rx,
        clients: Arc::new(AtomicUsize::new(0)),
        snapshot_period: cfg.snapshot_period,
        ranges: cfg.commands,
    };
    let app = Router::new()
        .route("/", get(|| async { "wheelgait teleop: connect a WebSocket to /ws\n" }))
        .route("/ws", get(upgrade))
        .with_state(state);
    tracing::info!(addr = ?listener.local_addr()?, "teleop listening");
    axum::serve(listener, app).await
}

async fn simulation_loop(
    mut env: Env,
    pilot: Pilot,
    cfg: TeleopConfig,
    mut command: watch::Receiver<VelocityCommand>,
    snapshot: watch::Sender<Arc<str>>,
) {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut ticker = tokio::time::interval(cfg.control_period);
    let mut p_est = vec![0.0; env.library().len()];
    let mut episode = 0u64;
    loop {
        ticker.tick().await;
        if snapshot.is_closed() {
            break;
        }
        env.set_command(*command.borrow_and_update());
        let step = match pilot.step(&mut env, &mut rng) {
            Ok(s) => s,
            Err(e) => {
                tracing::error!(error = %e, "control step failed; stopping simulation");
                break;
            }
        };
        if let Some(p) = step.prediction {
            p_est = p;
        }
        let msg = ServerMessage::State(StateSnapshot::capture(&env, &p_est, step.outcome.power));
        snapshot.send_replace(msg.to_json().into());
        if step.outcome.done() {
            episode += 1;
            tracing::warn!(time = env.time(), "robot fell; restarting");
            env.reset(env.command(), GaitId::DRIVING, cfg.seed.wrapping_add(episode));
        }
    }
}

async fn upgrade(ws: WebSocketUpgrade, State(state): State<AppState>) -> impl IntoResponse {
    ws.on_upgrade(move |socket| connection(socket, state))
}

async fn connection(mut socket: WebSocket, state: AppState) {
    state.clients.fetch_add(1, Ordering::SeqCst);
    let mut ticker = tokio::time::interval(state.snapshot_period);
    loop {
        tokio::select! {
            _ = ticker.tick() => {
                let text = state.snapshot.borrow().clone();
                if socket.send(Message::Text(text.as_ref().into())).await.is_err() {
                    break;
                }
            }
            incoming = socket.recv() => {
                let reply = match incoming {
                    Some(Ok(Message::Text(text))) => match parse_command(text.as_str(), &state.ranges) {
                        Ok(cmd) => {
                            state.command.send_replace(cmd);
                            None
                        }
                        Err(msg) => Some(ServerMessage::error(msg)),
                    },
                    Some(Ok(Message::Binary(_))) => Some(ServerMessage::error("binary frames are not supported")),
                    Some(Ok(Message::Close(_))) | None | Some(Err(_)) => break,
                    Some(Ok(_)) => None,
                };
                if let Some(r) = reply {
                    if socket.send(Message::Text(r.to_json().into())).await.is_err() {
                        break;
                    }
                }
            }
        }
    }
    // The robot stops when nobody is driving it.
    if state.clients.fetch_sub(1, Ordering::SeqCst) == 1 {
        state.command.send_replace(VelocityCommand::ZERO);
    }
}
