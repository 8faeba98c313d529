//! Loopback sessions through the perf wire protocol: byte accounting, rate
//! fidelity at small scale, BUSY/ERR handling.

use std::io::{Read, Write};
use std::net::TcpStream;
use std::time::Duration;

use mass_replay::wire::{client_stream, Direction, PerfServer, StreamRequest, Transport};

fn request(direction: Direction, duration_s: f64, rate_mbps: f64) -> StreamRequest {
    StreamRequest {
        direction,
        duration_s,
        rate_mbps,
        msg_size: 1024,
    }
}

#[test]
fn tcp_round_trip_accounts_every_byte() {
    let server = PerfServer::start("127.0.0.1", 0).unwrap();
    let port = server.port();

    let up = client_stream("127.0.0.1", port, Transport::Tcp, &request(Direction::Up, 0.5, 2.0));
    assert!(up.complete);
    assert_eq!(
        up.acked_bytes,
        Some(up.bytes),
        "TCP delivers everything the client sent"
    );
    assert!(up.bytes > 0);

    let down = client_stream(
        "127.0.0.1",
        port,
        Transport::Tcp,
        &request(Direction::Down, 0.5, 2.0),
    );
    assert!(down.complete);
    assert!(down.bytes > 0);

    server.stop();
}

#[test]
fn tcp_download_hits_requested_rate() {
    let server = PerfServer::start("127.0.0.1", 0).unwrap();
    // 2 Mbps for 1 s is 250 kB.
    let down = client_stream(
        "127.0.0.1",
        server.port(),
        Transport::Tcp,
        &request(Direction::Down, 1.0, 2.0),
    );
    let expected = 2.0e6 / 8.0;
    let ratio = down.bytes as f64 / expected;
    assert!(
        (0.8..=1.2).contains(&ratio),
        "got {} bytes, expected about {expected}",
        down.bytes
    );
    server.stop();
}

#[test]
fn udp_round_trip_reports_receiver_bytes() {
    let server = PerfServer::start("127.0.0.1", 0).unwrap();
    let port = server.port();

    let up = client_stream("127.0.0.1", port, Transport::Udp, &request(Direction::Up, 0.5, 2.0));
    assert!(up.complete, "got server ack");
    let acked = up.acked_bytes.expect("receiver count");
    assert!(acked <= up.bytes, "UDP cannot deliver more than was sent");
    assert!(acked > 0);

    let down = client_stream(
        "127.0.0.1",
        port,
        Transport::Udp,
        &request(Direction::Down, 0.5, 2.0),
    );
    assert!(down.bytes > 0);
    server.stop();
}

#[test]
fn malformed_header_gets_err_reply() {
    let server = PerfServer::start("127.0.0.1", 0).unwrap();
    let mut stream = TcpStream::connect(("127.0.0.1", server.port())).unwrap();
    stream.write_all(b"sideways 5 1 1024\n").unwrap();
    let mut reply = String::new();
    stream.set_read_timeout(Some(Duration::from_secs(2))).unwrap();
    stream.read_to_string(&mut reply).unwrap();
    assert!(reply.starts_with("ERR "), "got {reply:?}");
    server.stop();
}

#[test]
fn second_concurrent_tcp_session_gets_busy() {
    let server = PerfServer::start("127.0.0.1", 0).unwrap();
    let port = server.port();

    // Occupy the endpoint with a 1 s download.
    let occupant = std::thread::spawn(move || {
        client_stream(
            "127.0.0.1",
            port,
            Transport::Tcp,
            &request(Direction::Down, 1.0, 1.0),
        )
    });
    std::thread::sleep(Duration::from_millis(150));

    let mut second = TcpStream::connect(("127.0.0.1", port)).unwrap();
    second.write_all(b"down 1 1 1024\n").unwrap();
    let mut reply = Vec::new();
    second
        .set_read_timeout(Some(Duration::from_secs(2)))
        .unwrap();
    second.read_to_end(&mut reply).unwrap();
    assert_eq!(&reply, b"BUSY\n");

    let first = occupant.join().unwrap();
    assert!(first.complete, "the occupant stream was unaffected");
    server.stop();
}

#[test]
fn rejected_client_reports_failure() {
    let server = PerfServer::start("127.0.0.1", 0).unwrap();
    let port = server.port();
    let occupant = std::thread::spawn(move || {
        client_stream(
            "127.0.0.1",
            port,
            Transport::Tcp,
            &request(Direction::Down, 1.0, 1.0),
        )
    });
    std::thread::sleep(Duration::from_millis(150));
    let second = client_stream(
        "127.0.0.1",
        port,
        Transport::Tcp,
        &request(Direction::Down, 0.5, 1.0),
    );
    assert!(!second.complete);
    assert_eq!(second.bytes, 0);
    occupant.join().unwrap();
    server.stop();
}

#[test]
fn connection_refused_is_a_zero_byte_outcome() {
    // Nothing is listening on this port.
    let outcome = client_stream(
        "127.0.0.1",
        1,
        Transport::Tcp,
        &request(Direction::Down, 0.2, 1.0),
    );
    assert!(!outcome.complete);
    assert_eq!(outcome.bytes, 0);
}

#[test]
fn server_logs_its_history() {
    let server = PerfServer::start("127.0.0.1", 0).unwrap();
    let port = server.port();
    client_stream("127.0.0.1", port, Transport::Tcp, &request(Direction::Up, 0.3, 1.0));
    client_stream(
        "127.0.0.1",
        port,
        Transport::Udp,
        &request(Direction::Down, 0.3, 1.0),
    );
    std::thread::sleep(Duration::from_millis(100));
    let records = server.records();
    assert_eq!(records.len(), 2);
    assert!(records.iter().any(|r| matches!(r.transport, Transport::Tcp)));
    assert!(records.iter().any(|r| matches!(r.transport, Transport::Udp)));
    server.stop();
}
