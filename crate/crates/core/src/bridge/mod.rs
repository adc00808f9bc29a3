//! File-system protocol for external matchers.
//!
//! The core writes one directory per patch pair under a queue directory:
//!
//! ```text
//! <queue>/<request_id>/ref.srgr        reference patch, 1 channel
//! <queue>/<request_id>/src.srgr        source patch, 1 channel
//! <queue>/<request_id>/request.json    RequestSidecar
//! <queue>/<request_id>/request.ready   empty marker, written last
//! ```
//!
//! The matcher answers in the same directory with `flow.srgr` (3 channels:
//! Δrow, Δcol, confidence in `[0, 1]`) or `error.json` (`{"error": "..."}`),
//! then the empty `response.ready` marker. A `shutdown` marker in the queue
//! directory asks the matcher to exit once no request is pending.

use std::collections::VecDeque;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::poc::FlowGrid;
use crate::raster::{read_raster, write_raster, Raster, RasterError};
use crate::tiling::PatchPair;

pub const REQUEST_READY: &str = "request.ready";
pub const RESPONSE_READY: &str = "response.ready";
pub const SHUTDOWN: &str = "shutdown";
pub const QUEUE_ENV: &str = "RADARGRAM_QUEUE_DIR";
const POLL: Duration = Duration::from_millis(5);

#[derive(Debug, thiserror::Error)]
pub enum BridgeError {
    #[error("i/o on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error("no response to request {request_id} within {seconds} s")]
    Timeout { request_id: String, seconds: f64 },
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("matcher reported an error: {0}")]
    MatcherFailed(String),
    #[error("matcher spawn failure: {0}")]
    SpawnFailure(String),
}

impl BridgeError {
    fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        BridgeError::Io { path: path.into(), source }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequestSidecar {
    pub request_id: String,
    pub ref_image_id: String,
    pub src_image_id: String,
    pub ref_origin: [usize; 2],
    pub src_origin: [usize; 2],
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchRequest {
    pub request_id: String,
    pub dir: PathBuf,
    pub ref_patch: PathBuf,
    pub src_patch: PathBuf,
    pub sidecar: RequestSidecar,
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), BridgeError> {
    let tmp = path.with_extension("partial");
    fs::write(&tmp, bytes).map_err(|e| BridgeError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| BridgeError::io(path, e))
}

/// Materializes one request directory under `queue`; the ready marker is
/// written only after every other file is complete.
pub fn write_request(
    pair: &PatchPair,
    request_id: &str,
    ref_image_id: &str,
    src_image_id: &str,
    queue: &Path,
) -> Result<MatchRequest, BridgeError> {
    let dir = queue.join(request_id);
    fs::create_dir_all(&dir).map_err(|e| BridgeError::io(&dir, e))?;
    let sidecar = RequestSidecar {
        request_id: request_id.to_string(),
        ref_image_id: ref_image_id.to_string(),
        src_image_id: src_image_id.to_string(),
        ref_origin: [pair.spec.ref_origin.0, pair.spec.ref_origin.1],
        src_origin: [pair.src.origin.0, pair.src.origin.1],
        rows: pair.spec.height,
        cols: pair.spec.width,
    };
    let ref_patch = dir.join("ref.srgr");
    let src_patch = dir.join("src.srgr");
    write_raster(&pair.ref_pixels, &ref_patch)?;
    write_raster(&pair.src_pixels, &src_patch)?;
    let json = serde_json::to_vec_pretty(&sidecar).expect("sidecar serializes");
    write_atomic(&dir.join("request.json"), &json)?;
    let marker = dir.join(REQUEST_READY);
    fs::write(&marker, b"").map_err(|e| BridgeError::io(&marker, e))?;
    Ok(MatchRequest { request_id: request_id.to_string(), dir, ref_patch, src_patch, sidecar })
}

/// Reads a request directory; `None` until its ready marker exists.
pub fn read_request(dir: &Path) -> Result<Option<(RequestSidecar, Raster, Raster)>, BridgeError> {
    if !dir.join(REQUEST_READY).exists() {
        return Ok(None);
    }
    let path = dir.join("request.json");
    let text = fs::read(&path).map_err(|e| BridgeError::io(&path, e))?;
    let sidecar: RequestSidecar = serde_json::from_slice(&text)
        .map_err(|e| BridgeError::MalformedResponse(format!("request sidecar: {e}")))?;
    let r = read_raster(dir.join("ref.srgr"))?;
    let s = read_raster(dir.join("src.srgr"))?;
    Ok(Some((sidecar, r, s)))
}

pub fn write_response(dir: &Path, flow: &FlowGrid) -> Result<(), BridgeError> {
    write_raster(&flow.to_raster(), dir.join("flow.srgr"))?;
    let marker = dir.join(RESPONSE_READY);
    fs::write(&marker, b"").map_err(|e| BridgeError::io(&marker, e))
}

pub fn write_error(dir: &Path, message: &str) -> Result<(), BridgeError> {
    let body = serde_json::json!({ "error": message });
    write_atomic(&dir.join("error.json"), body.to_string().as_bytes())?;
    let marker = dir.join(RESPONSE_READY);
    fs::write(&marker, b"").map_err(|e| BridgeError::io(&marker, e))
}

/// Parses a completed response, checking it against the request dimensions.
fn parse_response(dir: &Path, rows: usize, cols: usize) -> Result<FlowGrid, BridgeError> {
    let err = dir.join("error.json");
    if err.exists() {
        let text = fs::read_to_string(&err).map_err(|e| BridgeError::io(&err, e))?;
        let msg = serde_json::from_str::<serde_json::Value>(&text)
            .ok()
            .and_then(|v| v.get("error").and_then(|m| m.as_str()).map(str::to_string))
            .unwrap_or(text);
        return Err(BridgeError::MatcherFailed(msg));
    }
    let raster = read_raster(dir.join("flow.srgr")).map_err(|e| BridgeError::MalformedResponse(e.to_string()))?;
    if raster.rows() != rows || raster.cols() != cols {
        return Err(BridgeError::MalformedResponse(format!(
            "flow is {}x{}, request was {rows}x{cols}",
            raster.rows(),
            raster.cols()
        )));
    }
    FlowGrid::from_raster(&raster).map_err(|e| match e {
        crate::poc::PocError::MalformedFlow(m) => BridgeError::MalformedResponse(m),
        other => BridgeError::MalformedResponse(other.to_string()),
    })
}

/// Waits for the response to `request` and validates it.
pub fn read_response(request: &MatchRequest, timeout: Duration) -> Result<FlowGrid, BridgeError> {
    let start = Instant::now();
    let marker = request.dir.join(RESPONSE_READY);
    while !marker.exists() {
        if start.elapsed() >= timeout {
            return Err(BridgeError::Timeout {
                request_id: request.request_id.clone(),
                seconds: timeout.as_secs_f64(),
            });
        }
        thread::sleep(POLL);
    }
    parse_response(&request.dir, request.sidecar.rows, request.sidecar.cols)
}

/// Matcher side of the protocol: answers every ready request in `queue` with
/// `handler` until a shutdown marker appears and nothing is pending.
pub fn serve_queue<F>(queue: &Path, mut handler: F) -> Result<usize, BridgeError>
where
    F: FnMut(&RequestSidecar, &Raster, &Raster) -> Result<FlowGrid, String>,
{
    let mut served = 0;
    loop {
        let shutting_down = queue.join(SHUTDOWN).exists();
        let mut pending: Vec<PathBuf> = match fs::read_dir(queue) {
            Ok(entries) => entries
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.is_dir() && p.join(REQUEST_READY).exists() && !p.join(RESPONSE_READY).exists())
                .collect(),
            Err(e) => return Err(BridgeError::io(queue, e)),
        };
        pending.sort();
        if pending.is_empty() {
            if shutting_down {
                return Ok(served);
            }
            thread::sleep(POLL);
            continue;
        }
        for dir in pending {
            match read_request(&dir) {
                Ok(Some((sidecar, r, s))) => {
                    if r.rows() != sidecar.rows || r.cols() != sidecar.cols || s.rows() != sidecar.rows || s.cols() != sidecar.cols {
                        write_error(&dir, "patch dimensions differ from the request sidecar")?;
                    } else {
                        match handler(&sidecar, &r, &s) {
                            Ok(flow) => write_response(&dir, &flow)?,
                            Err(msg) => write_error(&dir, &msg)?,
                        }
                    }
                }
                Ok(None) => continue,
                Err(e) => write_error(&dir, &e.to_string())?,
            }
            served += 1;
        }
    }
}

/// Per-pair outcome of a batch.
#[derive(Debug)]
pub struct BatchOutcome {
    /// In input order.
    pub results: Vec<Result<FlowGrid, BridgeError>>,
}

impl BatchOutcome {
    pub fn failures(&self) -> Vec<(usize, &BridgeError)> {
        self.results
            .iter()
            .enumerate()
            .filter_map(|(i, r)| r.as_ref().err().map(|e| (i, e)))
            .collect()
    }
}

/// One pair to send: the patches and the image ids for the sidecar.
#[derive(Debug, Clone, Copy)]
pub struct BatchItem<'a> {
    pub pair: &'a PatchPair,
    pub ref_image_id: &'a str,
    pub src_image_id: &'a str,
}

struct Matcher {
    child: Child,
}

impl Matcher {
    fn spawn(command: &str, queue: &Path) -> Result<Self, BridgeError> {
        let child = Command::new("sh")
            .arg("-c")
            .arg(format!("{command} \"$1\""))
            .arg("sh")
            .arg(queue)
            .env(QUEUE_ENV, queue)
            .stdin(Stdio::null())
            .spawn()
            .map_err(|e| BridgeError::SpawnFailure(format!("cannot start `{command}`: {e}")))?;
        Ok(Self { child })
    }

    fn exited(&mut self) -> Option<std::process::ExitStatus> {
        self.child.try_wait().ok().flatten()
    }

    fn stop(mut self, queue: &Path, grace: Duration) {
        let _ = fs::write(queue.join(SHUTDOWN), b"");
        let start = Instant::now();
        while start.elapsed() < grace {
            if self.exited().is_some() {
                return;
            }
            thread::sleep(POLL);
        }
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// Runs `command` as a matcher over `queue` and collects one FlowGrid per
/// item, keeping at most `parallelism` requests outstanding.
///
/// The command is run through `sh -c` with the queue directory appended as
/// its last argument (also exported as `RADARGRAM_QUEUE_DIR`). Per-pair
/// timeouts and malformed responses are recorded in the outcome; the batch
/// fails as a whole only when the matcher cannot be started or exits while
/// requests are still unanswered.
pub fn run_external_matcher(
    command: &str,
    items: &[BatchItem<'_>],
    queue: &Path,
    parallelism: usize,
    timeout: Duration,
) -> Result<BatchOutcome, BridgeError> {
    fs::create_dir_all(queue).map_err(|e| BridgeError::io(queue, e))?;
    let _ = fs::remove_file(queue.join(SHUTDOWN));
    let parallelism = parallelism.max(1);
    let mut matcher = Matcher::spawn(command, queue)?;

    let mut results: Vec<Option<Result<FlowGrid, BridgeError>>> = (0..items.len()).map(|_| None).collect();
    let mut waiting: VecDeque<usize> = (0..items.len()).collect();
    let mut outstanding: Vec<(usize, MatchRequest, Instant)> = Vec::new();
    loop {
        while outstanding.len() < parallelism {
            let Some(k) = waiting.pop_front() else { break };
            let it = &items[k];
            let id = format!("req{k:06}");
            let dir = queue.join(&id);
            if dir.exists() {
                fs::remove_dir_all(&dir).map_err(|e| BridgeError::io(&dir, e))?;
            }
            match write_request(it.pair, &id, it.ref_image_id, it.src_image_id, queue) {
                Ok(req) => outstanding.push((k, req, Instant::now())),
                Err(e) => results[k] = Some(Err(e)),
            }
        }
        if outstanding.is_empty() {
            break;
        }
        let mut progressed = false;
        outstanding.retain(|(k, req, started)| {
            if req.dir.join(RESPONSE_READY).exists() {
                results[*k] = Some(parse_response(&req.dir, req.sidecar.rows, req.sidecar.cols));
                progressed = true;
                false
            } else if started.elapsed() >= timeout {
                results[*k] = Some(Err(BridgeError::Timeout {
                    request_id: req.request_id.clone(),
                    seconds: timeout.as_secs_f64(),
                }));
                progressed = true;
                false
            } else {
                true
            }
        });
        if !progressed {
            if let Some(status) = matcher.exited() {
                // One last look: the matcher may have answered just before exiting.
                if outstanding.iter().all(|(_, r, _)| r.dir.join(RESPONSE_READY).exists()) {
                    continue;
                }
                let _ = fs::write(queue.join(SHUTDOWN), b"");
                return Err(BridgeError::SpawnFailure(format!(
                    "`{command}` exited with {status} while {} request(s) were unanswered",
                    outstanding.len() + waiting.len()
                )));
            }
            thread::sleep(POLL);
        }
    }
    matcher.stop(queue, Duration::from_secs(2));
    Ok(BatchOutcome {
        results: results.into_iter().map(|r| r.expect("every item resolved")).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::poc::{match_rasters, PocParams};
    use crate::tiling::{PatchSpec, SrcLocation};

    fn pair(rows: usize, cols: usize, seed: u64) -> PatchPair {
        let r = crate::poc::testing::speckle(rows, cols, seed);
        let s = crate::poc::testing::fourier_shift(&r, 1.5, -2.25);
        PatchPair {
            spec: PatchSpec { ref_origin: (10, 20), height: rows, width: cols },
            src: SrcLocation { origin: (12, 17), clamp_offset: (0, 0), out_of_bounds: false },
            ref_pixels: r,
            src_pixels: s,
        }
    }

    fn bits(r: &Raster) -> Vec<u32> {
        r.values().iter().map(|v| v.to_bits()).collect()
    }

    #[test]
    fn request_directory_contract() {
        let q = tempfile::tempdir().unwrap();
        let p = pair(8, 6, 1);
        let req = write_request(&p, "a", "ref", "src", q.path()).unwrap();
        let mut names: Vec<String> = fs::read_dir(&req.dir)
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .collect();
        names.sort();
        assert_eq!(names, ["ref.srgr", "request.json", "request.ready", "src.srgr"]);
        let (side, r, s) = read_request(&req.dir).unwrap().unwrap();
        assert_eq!(bits(&r), bits(&p.ref_pixels));
        assert_eq!(bits(&s), bits(&p.src_pixels));
        assert_eq!(side.src_origin, [12, 17]);
        assert_eq!((side.rows, side.cols), (8, 6));
    }

    #[test]
    fn directory_without_marker_is_ignored() {
        let q = tempfile::tempdir().unwrap();
        let req = write_request(&pair(4, 4, 2), "x", "a", "b", q.path()).unwrap();
        fs::remove_file(req.dir.join(REQUEST_READY)).unwrap();
        assert!(read_request(&req.dir).unwrap().is_none());
        fs::write(q.path().join(SHUTDOWN), b"").unwrap();
        assert_eq!(serve_queue(q.path(), |_, _, _| Err("unreachable".into())).unwrap(), 0);
        assert!(!req.dir.join(RESPONSE_READY).exists());
    }

    #[test]
    fn poc_flow_round_trips_bit_exactly() {
        let q = tempfile::tempdir().unwrap();
        let p = pair(128, 128, 3);
        let flow = match_rasters(&p.ref_pixels, &p.src_pixels, &PocParams::default()).unwrap();
        let req = write_request(&p, "poc", "a", "b", q.path()).unwrap();
        write_response(&req.dir, &flow).unwrap();
        let back = read_response(&req, Duration::from_secs(1)).unwrap();
        assert_eq!(bits(&back.displacement), bits(&flow.displacement));
        assert_eq!(bits(&back.confidence), bits(&flow.confidence));
    }

    #[test]
    fn response_validation() {
        let q = tempfile::tempdir().unwrap();
        let req = write_request(&pair(4, 5, 4), "v", "a", "b", q.path()).unwrap();
        let mut bad = FlowGrid::uniform(4, 5, 0.0, 0.0, 1.0);
        bad.confidence.set(2, 2, 0, 1.5);
        write_response(&req.dir, &bad).unwrap();
        match read_response(&req, Duration::from_secs(1)) {
            Err(BridgeError::MalformedResponse(m)) => assert_eq!(m, "confidence out of range"),
            other => panic!("{other:?}"),
        }
        write_response(&req.dir, &FlowGrid::uniform(5, 4, 0.0, 0.0, 1.0)).unwrap();
        assert!(matches!(read_response(&req, Duration::from_secs(1)), Err(BridgeError::MalformedResponse(_))));
    }

    #[test]
    fn missing_response_times_out() {
        let q = tempfile::tempdir().unwrap();
        let req = write_request(&pair(4, 4, 5), "t", "a", "b", q.path()).unwrap();
        let start = Instant::now();
        assert!(matches!(
            read_response(&req, Duration::from_millis(50)),
            Err(BridgeError::Timeout { .. })
        ));
        assert!(start.elapsed() >= Duration::from_millis(50));
    }

    #[test]
    fn in_process_server_answers_in_order() {
        let q = tempfile::tempdir().unwrap();
        let queue = q.path().to_path_buf();
        let server = {
            let queue = queue.clone();
            thread::spawn(move || {
                serve_queue(&queue, |side, r, _| {
                    let v = side.ref_origin[0] as f32;
                    Ok(FlowGrid::uniform(r.rows(), r.cols(), v, 0.0, 1.0))
                })
            })
        };
        let pairs: Vec<PatchPair> = (0..5)
            .map(|k| {
                let mut p = pair(4, 4, k);
                p.spec.ref_origin = (k as usize, 0);
                p
            })
            .collect();
        let mut reqs = Vec::new();
        for (k, p) in pairs.iter().enumerate() {
            reqs.push(write_request(p, &format!("r{k}"), "a", "b", &queue).unwrap());
        }
        for (k, req) in reqs.iter().enumerate().rev() {
            let f = read_response(req, Duration::from_secs(10)).unwrap();
            assert_eq!(f.get(0, 0), Some((k as f64, 0.0, 1.0)));
        }
        fs::write(queue.join(SHUTDOWN), b"").unwrap();
        assert_eq!(server.join().unwrap().unwrap(), 5);
    }

    #[test]
    fn immediately_exiting_command_is_a_spawn_failure() {
        let q = tempfile::tempdir().unwrap();
        let p = pair(4, 4, 6);
        let items = [BatchItem { pair: &p, ref_image_id: "a", src_image_id: "b" }];
        for cmd in ["false", "true", "/nonexistent/matcher"] {
            let r = run_external_matcher(cmd, &items, q.path(), 2, Duration::from_secs(20));
            assert!(matches!(r, Err(BridgeError::SpawnFailure(_))), "{cmd}: {r:?}");
        }
    }

    #[test]
    fn silent_matcher_times_out_per_pair() {
        let q = tempfile::tempdir().unwrap();
        let p = pair(4, 4, 7);
        let items = [
            BatchItem { pair: &p, ref_image_id: "a", src_image_id: "b" },
            BatchItem { pair: &p, ref_image_id: "a", src_image_id: "b" },
        ];
        let out = run_external_matcher("sleep 30 #", &items, q.path(), 1, Duration::from_millis(100)).unwrap();
        assert_eq!(out.failures().len(), 2);
        assert!(out.results.iter().all(|r| matches!(r, Err(BridgeError::Timeout { .. }))));
    }
}
