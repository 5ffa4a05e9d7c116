use std::time::{Duration, Instant};

use futures_util::{SinkExt, StreamExt};
use tokio::net::TcpListener;
use tokio_tungstenite::tungstenite::Message;
use wheelgait::env::Pilot;
use wheelgait::gait::GaitId;
use wheelgait_runtime::protocol::ServerMessage;
use wheelgait_runtime::teleop::{serve, TeleopConfig};

type Client = tokio_tungstenite::WebSocketStream<tokio_tungstenite::MaybeTlsStream<tokio::net::TcpStream>>;

async fn start() -> (String, tokio::task::JoinHandle<std::io::Result<()>>) {
    let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
    let url = format!("ws://{}/ws", listener.local_addr().unwrap());
    let server = tokio::spawn(serve(listener, Pilot::nominal(GaitId::DRIVING), TeleopConfig::default()));
    (url, server)
}

async fn connect(url: &str) -> Client {
    tokio_tungstenite::connect_async(url).await.unwrap().0
}

async fn next_message(ws: &mut Client) -> ServerMessage {
    loop {
        let frame = tokio::time::timeout(Duration::from_secs(5), ws.next())
            .await
            .expect("server keeps talking")
            .expect("stream open")
            .expect("valid frame");
        if let Message::Text(t) = frame {
            return serde_json::from_str(t.as_str()).expect("well-formed server message");
        }
    }
}

async fn next_state(ws: &mut Client) -> wheelgait_runtime::protocol::StateSnapshot {
    loop {
        if let ServerMessage::State(s) = next_message(ws).await {
            return s;
        }
    }
}

async fn send(ws: &mut Client, text: &str) {
    ws.send(Message::Text(text.into())).await.unwrap();
}

/// Discard frames that queued up while the test was not reading.
async fn drain(ws: &mut Client) {
    while let Ok(Some(_)) = tokio::time::timeout(Duration::from_millis(15), ws.next()).await {}
}

/// Mean forward speed over the snapshots received during `window`.
async fn mean_forward_speed(ws: &mut Client, window: Duration) -> f64 {
    drain(ws).await;
    let end = Instant::now() + window;
    let (mut sum, mut n) = (0.0, 0);
    while Instant::now() < end {
        sum += next_state(ws).await.base.vel[0];
        n += 1;
    }
    sum / n as f64
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn commanded_robot_approaches_setpoint() {
    let (url, server) = start().await;
    let mut ws = connect(&url).await;
    let first = next_state(&mut ws).await;
    assert_eq!(first.gait, "driving");
    assert_eq!(first.p_est.len(), 3);

    // With no command the robot holds still.
    assert!(mean_forward_speed(&mut ws, Duration::from_millis(500)).await.abs() < 0.05);

    send(&mut ws, r#"{"type":"cmd","vx":0.5,"vy":0,"wz":0}"#).await;
    tokio::time::sleep(Duration::from_secs(2)).await;
    let v = mean_forward_speed(&mut ws, Duration::from_millis(500)).await;
    assert!((v - 0.5).abs() < 0.1, "forward speed {v}");
    server.abort();
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn malformed_message_gets_error_and_connection_survives() {
    let (url, server) = start().await;
    let mut ws = connect(&url).await;
    send(&mut ws, "{not json").await;
    let mut saw_error = false;
    for _ in 0..20 {
        if let ServerMessage::Error { msg } = next_message(&mut ws).await {
            assert!(msg.contains("malformed"));
            saw_error = true;
            break;
        }
    }
    assert!(saw_error);
    send(&mut ws, r#"{"type":"cmd","vx":3.0,"vy":0,"wz":0}"#).await;
    let mut saw_range_error = false;
    for _ in 0..20 {
        if let ServerMessage::Error { msg } = next_message(&mut ws).await {
            assert!(msg.contains("out of range"));
            saw_range_error = true;
            break;
        }
    }
    assert!(saw_range_error);
    // Still streaming state afterwards.
    next_state(&mut ws).await;
    server.abort();
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn two_clients_last_writer_wins() {
    let (url, server) = start().await;
    let mut a = connect(&url).await;
    let mut b = connect(&url).await;
    send(&mut a, r#"{"type":"cmd","vx":-0.3,"vy":0,"wz":0}"#).await;
    tokio::time::sleep(Duration::from_millis(200)).await;
    send(&mut b, r#"{"type":"cmd","vx":0.6,"vy":0,"wz":0}"#).await;
    tokio::time::sleep(Duration::from_secs(2)).await;
    // Both receive snapshots of the same robot.
    let va = mean_forward_speed(&mut a, Duration::from_millis(400)).await;
    let vb = mean_forward_speed(&mut b, Duration::from_millis(400)).await;
    assert!((va - 0.6).abs() < 0.12, "client a sees {va}");
    assert!((vb - 0.6).abs() < 0.12, "client b sees {vb}");
    server.abort();
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn snapshots_arrive_at_twenty_hertz() {
    let (url, server) = start().await;
    let mut ws = connect(&url).await;
    next_state(&mut ws).await;
    let mut times = Vec::new();
    for _ in 0..41 {
        next_state(&mut ws).await;
        times.push(Instant::now());
    }
    let gaps: Vec<f64> = times.windows(2).map(|w| (w[1] - w[0]).as_secs_f64()).collect();
    let mean = gaps.iter().sum::<f64>() / gaps.len() as f64;
    assert!((mean - 0.05).abs() < 0.01, "mean period {mean}");
    let mut sorted = gaps.clone();
    sorted.sort_by(f64::total_cmp);
    // Median jitter within 20 % of the nominal period.
    assert!((sorted[sorted.len() / 2] - 0.05).abs() < 0.01, "median period {}", sorted[sorted.len() / 2]);
    server.abort();
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn root_page_points_to_websocket() {
    let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    let server = tokio::spawn(serve(listener, Pilot::nominal(GaitId::DRIVING), TeleopConfig::default()));
    let mut stream = tokio::net::TcpStream::connect(addr).await.unwrap();
    use tokio::io::{AsyncReadExt, AsyncWriteExt};
    stream.write_all(b"GET / HTTP/1.1\r\nHost: x\r\nConnection: close\r\n\r\n").await.unwrap();
    let mut body = String::new();
    stream.read_to_string(&mut body).await.unwrap();
    assert!(body.contains("/ws"));
    server.abort();
}
