//! Live gate service: one controller event loop fed by a TCP listener.
//!
//! Clients send the scenario event lines `arrive ...`, `exit <plate>` and
//! (with the simulated barrier) `pass`, one per line, and get one reply
//! line each: `ok`, `departed <plate> <slot>`, `anomaly <why>` or
//! `err <message>`. `quit` stops the service. Trace lines go to stdout as
//! they happen.

use std::io::{BufRead, BufReader, Write};
use std::net::{TcpListener, TcpStream};
use std::process::ExitCode;
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use anyhow::{Context, Result};
use log::{info, warn};

use gatepark::barrier::{BarrierLink, BarrierSim, SimLink, StreamLink};
use gatepark::clock::{Clock, WallClock};
use gatepark::config::{AppConfig, BarrierEndpoint};
use gatepark::gate::{parse_scenario, ExitOutcome, GateController, ScenarioEvent};
use gatepark::store::Store;

/// Upper bound on how long the loop sleeps without a deadline.
const IDLE_POLL_MS: u64 = 200;

type Request = (String, Sender<String>);

fn client(stream: TcpStream, tx: Sender<Request>) -> std::io::Result<()> {
    let mut writer = stream.try_clone()?;
    for line in BufReader::new(stream).lines() {
        let line = line?;
        let (reply_tx, reply_rx) = mpsc::channel();
        // Answered here because the process may exit as soon as the loop
        // sees it.
        if line.trim() == "quit" {
            writeln!(writer, "bye")?;
            writer.flush()?;
            let _ = tx.send((line, reply_tx));
            break;
        }
        if tx.send((line, reply_tx)).is_err() {
            break;
        }
        let Ok(reply) = reply_rx.recv() else { break };
        writeln!(writer, "{reply}")?;
        writer.flush()?;
    }
    Ok(())
}

fn accept_loop(listener: TcpListener, tx: Sender<Request>) {
    for stream in listener.incoming() {
        match stream {
            Ok(s) => {
                let tx = tx.clone();
                thread::spawn(move || {
                    if let Err(e) = client(s, tx) {
                        warn!("client connection: {e}");
                    }
                });
            }
            Err(e) => warn!("accept: {e}"),
        }
    }
}

struct Service {
    controller: GateController,
    sim: Option<Arc<Mutex<BarrierSim>>>,
    clock: Arc<dyn Clock>,
    printed: usize,
}

impl Service {
    fn flush_trace(&mut self) -> Result<()> {
        let trace = self.controller.trace();
        let mut out = std::io::stdout().lock();
        for line in &trace[self.printed..] {
            writeln!(out, "{line}")?;
        }
        out.flush()?;
        self.printed = trace.len();
        Ok(())
    }

    fn handle(&mut self, line: &str) -> String {
        let events = match parse_scenario(line) {
            Ok(e) => e,
            Err(e) => return format!("err {e}"),
        };
        let Some(ev) = events.into_iter().next() else {
            return "err empty line".into();
        };
        let result = match ev {
            ScenarioEvent::Arrive(a) => self.controller.arrive(a).map(|_| "ok".to_string()),
            ScenarioEvent::Exit(p) => self.controller.exit(&p).map(|o| match o {
                ExitOutcome::Departed { plate, slot } => format!("departed {plate} {slot}"),
                ExitOutcome::Anomaly(why) => format!("anomaly {why}"),
            }),
            ScenarioEvent::Pass => match &self.sim {
                Some(sim) => {
                    let now = self.clock.now_ms();
                    if sim.lock().expect("sim lock").vehicle_passes(now) {
                        self.controller.poll().map(|_| "ok".to_string())
                    } else {
                        Ok("anomaly pass_while_closed".to_string())
                    }
                }
                None => Ok("err pass is reported by the barrier device".to_string()),
            },
            ScenarioEvent::Tick(_) => Ok("err tick is only meaningful in scenarios".to_string()),
        };
        result.unwrap_or_else(|e| format!("err {e}"))
    }
}

pub fn run(cfg: AppConfig) -> Result<ExitCode> {
    let clock: Arc<dyn Clock> = Arc::new(WallClock::new());
    let store = Store::open(&cfg.store_dir, Arc::clone(&clock))
        .with_context(|| format!("opening store {}", cfg.store_dir.display()))?;
    let (link, sim): (Box<dyn BarrierLink>, _) = match &cfg.barrier {
        BarrierEndpoint::Sim => {
            let sim = Arc::new(Mutex::new(BarrierSim::default()));
            (Box::new(SimLink::new(Arc::clone(&sim), Arc::clone(&clock))), Some(sim))
        }
        BarrierEndpoint::Tcp(addr) => (
            Box::new(StreamLink::connect(addr.as_str()).with_context(|| format!("barrier at {addr}"))?),
            None,
        ),
    };
    let controller = GateController::new(
        cfg.gate.clone(),
        store,
        cfg.backends()?,
        link,
        Arc::clone(&clock),
        cfg.frame_root.clone(),
    )?;
    let listener = TcpListener::bind(("127.0.0.1", cfg.listen_port))
        .with_context(|| format!("binding port {}", cfg.listen_port))?;
    super::announce(&listener)?;
    let (tx, rx): (Sender<Request>, Receiver<Request>) = mpsc::channel();
    thread::spawn(move || accept_loop(listener, tx));

    let mut svc = Service {
        controller,
        sim,
        clock,
        printed: 0,
    };
    loop {
        let now = svc.clock.now_ms();
        let wait = svc
            .controller
            .next_deadline()
            .map_or(IDLE_POLL_MS, |d| d.saturating_sub(now).min(IDLE_POLL_MS));
        match rx.recv_timeout(Duration::from_millis(wait.max(1))) {
            Ok((line, _)) if line.trim() == "quit" => break,
            Ok((line, reply)) => {
                let answer = svc.handle(&line);
                let _ = reply.send(answer);
            }
            Err(RecvTimeoutError::Timeout) => {}
            Err(RecvTimeoutError::Disconnected) => break,
        }
        svc.controller.poll()?;
        svc.flush_trace()?;
    }
    svc.flush_trace()?;
    info!("live service stopped");
    Ok(ExitCode::SUCCESS)
}
