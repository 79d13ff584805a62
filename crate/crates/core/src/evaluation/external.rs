//! External evaluation over a line-delimited JSON protocol.
//!
//! One worker process per concurrently evaluated individual. Each training
//! segment is one request line on the worker's stdin:
//!
//! ```text
//! {"genome": <genome record>, "train_from": 0, "train_to": 200, "run_id": "g0-i3"}
//! ```
//!
//! and one response line on its stdout, in request order:
//!
//! ```text
//! {"fitness": 0.81, "run_id": "g0-i3"}
//! ```
//!
//! The worker owns per-`run_id` training state so later segments resume
//! where the previous one stopped. Crashes, malformed lines and timeouts
//! surface as evaluation failures for that individual only.

use super::{CheckpointFitness, EvalRequest, Evaluator, EvaluatorFailure, FitnessReport};
use crate::genome::Genome;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Mutex;
use std::time::{Duration, Instant};

/// Default per-segment response timeout, in seconds.
pub const DEFAULT_TIMEOUT_SECS: f64 = 600.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkerConfig {
    /// Program and arguments of the worker process.
    pub command: Vec<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
}

fn default_timeout() -> f64 {
    DEFAULT_TIMEOUT_SECS
}

impl WorkerConfig {
    pub fn check(&self) -> Result<(), String> {
        if self.command.is_empty() {
            return Err("external worker command is empty".into());
        }
        if !(self.timeout_secs > 0.0) {
            return Err("external worker timeout must be positive".into());
        }
        Ok(())
    }
}

#[derive(Serialize)]
struct WireRequest<'a> {
    genome: &'a Genome,
    train_from: u64,
    train_to: u64,
    run_id: &'a str,
}

#[derive(Deserialize)]
struct WireResponse {
    fitness: f64,
    run_id: String,
}

struct Worker {
    child: Child,
    stdin: ChildStdin,
    lines: Receiver<std::io::Result<String>>,
}

impl Worker {
    fn spawn(config: &WorkerConfig) -> Result<Self, EvaluatorFailure> {
        let mut child = Command::new(&config.command[0])
            .args(&config.command[1..])
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .map_err(|e| {
                EvaluatorFailure::WorkerCrash(format!(
                    "failed to spawn {:?}: {e}",
                    config.command[0]
                ))
            })?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let (tx, lines) = mpsc::channel();
        std::thread::spawn(move || {
            let reader = BufReader::new(stdout);
            for line in reader.lines() {
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        Ok(Worker { child, stdin, lines })
    }

    fn round_trip(
        &mut self,
        request: &WireRequest<'_>,
        timeout: Duration,
    ) -> Result<f64, EvaluatorFailure> {
        let mut line = serde_json::to_string(request)
            .map_err(|e| EvaluatorFailure::Internal(e.to_string()))?;
        line.push('\n');
        self.stdin
            .write_all(line.as_bytes())
            .and_then(|_| self.stdin.flush())
            .map_err(|e| EvaluatorFailure::WorkerCrash(format!("request write failed: {e}")))?;

        let response = match self.lines.recv_timeout(timeout) {
            Ok(Ok(text)) => text,
            Ok(Err(e)) => {
                return Err(EvaluatorFailure::WorkerCrash(format!("read failed: {e}")))
            }
            Err(RecvTimeoutError::Timeout) => {
                return Err(EvaluatorFailure::Timeout(timeout.as_secs_f64()))
            }
            Err(RecvTimeoutError::Disconnected) => {
                return Err(EvaluatorFailure::WorkerCrash(
                    "worker closed stdout before responding".into(),
                ))
            }
        };

        let parsed: WireResponse = serde_json::from_str(&response).map_err(|e| {
            EvaluatorFailure::ProtocolViolation(format!("malformed response {response:?}: {e}"))
        })?;
        if parsed.run_id != request.run_id {
            return Err(EvaluatorFailure::ProtocolViolation(format!(
                "response run_id {:?} does not match request {:?}",
                parsed.run_id, request.run_id
            )));
        }
        if !(parsed.fitness.is_finite() && (0.0..=1.0).contains(&parsed.fitness)) {
            return Err(EvaluatorFailure::ProtocolViolation(format!(
                "fitness {} outside [0, 1]",
                parsed.fitness
            )));
        }
        Ok(parsed.fitness)
    }
}

impl Drop for Worker {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// Drive one worker through the full checkpoint schedule of a single
/// genome, one request per segment.
pub fn evaluate_external(
    genome: &Genome,
    checkpoints: &[u64],
    config: &WorkerConfig,
) -> Result<FitnessReport, EvaluatorFailure> {
    config.check().map_err(EvaluatorFailure::Internal)?;
    let mut report = FitnessReport::default();
    if checkpoints.is_empty() {
        return Ok(report);
    }
    let timeout = Duration::from_secs_f64(config.timeout_secs);
    let mut worker = Worker::spawn(config)?;
    let mut from = 0u64;
    for &to in checkpoints {
        let start = Instant::now();
        let fitness = worker.round_trip(
            &WireRequest { genome, train_from: from, train_to: to, run_id: "eval" },
            timeout,
        )?;
        report.checkpoints.push(CheckpointFitness {
            iterations: to,
            fitness,
            wall_seconds: start.elapsed().as_secs_f64(),
        });
        from = to;
    }
    Ok(report)
}

/// Evaluator backend that delegates to worker processes, one per live
/// individual so that per-individual training state stays in one process.
pub struct ExternalEvaluator {
    config: WorkerConfig,
    workers: Mutex<HashMap<u64, Worker>>,
}

impl ExternalEvaluator {
    pub fn new(config: WorkerConfig) -> Result<Self, EvaluatorFailure> {
        config.check().map_err(EvaluatorFailure::Internal)?;
        Ok(ExternalEvaluator { config, workers: Mutex::new(HashMap::new()) })
    }
}

impl Evaluator for ExternalEvaluator {
    fn train_segment(&self, req: &EvalRequest<'_>) -> Result<f64, EvaluatorFailure> {
        let existing = self.workers.lock().expect("worker map").remove(&req.individual_id);
        let mut worker = match existing {
            Some(worker) => worker,
            None => Worker::spawn(&self.config)?,
        };
        let run_id = format!("g{}-i{}", req.generation, req.individual_id);
        let result = worker.round_trip(
            &WireRequest {
                genome: req.genome,
                train_from: req.train_from,
                train_to: req.train_to,
                run_id: &run_id,
            },
            Duration::from_secs_f64(self.config.timeout_secs),
        );
        match result {
            Ok(fitness) => {
                self.workers
                    .lock()
                    .expect("worker map")
                    .insert(req.individual_id, worker);
                Ok(fitness)
            }
            Err(failure) => Err(failure), // worker dropped and killed here
        }
    }

    fn discard(&self, individual_id: u64) {
        self.workers.lock().expect("worker map").remove(&individual_id);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::genome::TensorShape;

    fn sh_worker(script: &str) -> WorkerConfig {
        WorkerConfig {
            command: vec!["sh".into(), "-c".into(), script.into()],
            timeout_secs: 5.0,
        }
    }

    #[test]
    fn malformed_response_is_a_protocol_violation() {
        let genome = Genome::seed(TensorShape::new(3, 8, 8), 10);
        let config = sh_worker("read line; echo not-json");
        let err = evaluate_external(&genome, &[100], &config).unwrap_err();
        assert!(matches!(err, EvaluatorFailure::ProtocolViolation(_)), "{err}");
    }

    #[test]
    fn silent_exit_is_a_worker_crash() {
        let genome = Genome::seed(TensorShape::new(3, 8, 8), 10);
        let config = sh_worker("read line; exit 3");
        let err = evaluate_external(&genome, &[100], &config).unwrap_err();
        assert!(matches!(err, EvaluatorFailure::WorkerCrash(_)), "{err}");
    }

    #[test]
    fn slow_worker_times_out() {
        let genome = Genome::seed(TensorShape::new(3, 8, 8), 10);
        let mut config = sh_worker("read line; sleep 30");
        config.timeout_secs = 0.3;
        let start = Instant::now();
        let err = evaluate_external(&genome, &[100], &config).unwrap_err();
        assert!(matches!(err, EvaluatorFailure::Timeout(_)), "{err}");
        assert!(start.elapsed() < Duration::from_secs(5));
    }

    #[test]
    fn out_of_range_fitness_is_rejected() {
        let genome = Genome::seed(TensorShape::new(3, 8, 8), 10);
        // Respond with the right run_id but an impossible fitness.
        let config = sh_worker(r#"read line; echo '{"fitness": 1.5, "run_id": "eval"}'"#);
        let err = evaluate_external(&genome, &[100], &config).unwrap_err();
        assert!(matches!(err, EvaluatorFailure::ProtocolViolation(_)), "{err}");
    }

    #[test]
    fn empty_checkpoints_spawn_nothing() {
        let genome = Genome::seed(TensorShape::new(3, 8, 8), 10);
        let config = WorkerConfig {
            command: vec!["definitely-not-a-real-binary".into()],
            timeout_secs: 1.0,
        };
        let report = evaluate_external(&genome, &[], &config).unwrap();
        assert!(report.checkpoints.is_empty());
    }
}
