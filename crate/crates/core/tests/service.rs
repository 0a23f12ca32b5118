use std::io::{self, BufReader, Read, Write};
use std::net::TcpStream;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use bbt_core::model::{Batch, FewShotTask, TaskParams, ToyConfig, ToyModel, MASK_ID};
use bbt_core::optimizer::{
    run_bbt, run_bbtv2, serve_inference, EvalApi, InProcessApi, PromptPayload, RunConfig, RunError,
};
use bbt_core::service::codec::{self, ErrorCode, FRAME_PREFIX_LEN, INFER_HEADER_LEN, MESSAGE_HEADER_LEN};
use bbt_core::service::{serve, InferenceRequest, Message, RemoteEvalApi, ServerConfig, ServerHandle};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_model() -> Arc<ToyModel> {
    Arc::new(
        ToyModel::new(ToyConfig {
            vocab: 64,
            hidden: 16,
            layers: 3,
            prompt_len: 4,
            key_dim: 8,
            ffn_dim: 16,
            label_words: 4,
            seed: 11,
            ..ToyConfig::default()
        })
        .unwrap(),
    )
}

fn start(model: &Arc<ToyModel>) -> ServerHandle {
    serve(Arc::clone(model), "127.0.0.1:0", ServerConfig::default()).unwrap()
}

fn task(model: &ToyModel, seed: u64) -> FewShotTask {
    let mut p = TaskParams::sentiment(8, seed).for_model(model.config());
    p.test_per_class = 4;
    FewShotTask::generate(&p).unwrap()
}

fn random_prompt(rng: &mut ChaCha8Rng, model: &ToyModel) -> PromptPayload {
    let c = model.config();
    let n = c.prompt_len * c.hidden;
    let kind = rng.random_range(0..3);
    let mut layer = || (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect::<Vec<_>>();
    match kind {
        0 => PromptPayload::None,
        1 => PromptPayload::Input(layer()),
        _ => PromptPayload::Deep((0..c.layers).map(|_| layer()).collect()),
    }
}

fn exchange(stream: &mut TcpStream, msg: &Message) -> Message {
    codec::write_frame(stream, &codec::encode(msg).unwrap()).unwrap();
    codec::decode(&codec::read_frame(stream).unwrap().unwrap()).unwrap()
}

#[test]
fn concurrent_clients_get_their_own_responses() {
    let model = small_model();
    let server = start(&model);
    let addr = server.local_addr();
    let shape = InProcessApi::new(Arc::clone(&model)).shape().unwrap();
    let batch = Batch::from_examples(&task(&model, 0).train, 2).unwrap();

    let clients: Vec<_> = (0..4u64)
        .map(|t| {
            let model = Arc::clone(&model);
            let batch = batch.clone();
            std::thread::spawn(move || {
                let mut stream = TcpStream::connect(addr).unwrap();
                let mut rng = ChaCha8Rng::seed_from_u64(t);
                let mut ok = 0;
                for i in 0..100 {
                    let id = t * 1_000_000 + i;
                    let prompt = random_prompt(&mut rng, &model);
                    let req = InferenceRequest::new(id, batch.clone(), prompt.clone(), shape);
                    match exchange(&mut stream, &Message::InferRequest(req)) {
                        Message::InferResponse(r) => {
                            assert_eq!(r.request_id, id);
                            assert_eq!(r.logits, serve_inference(&model, &prompt, &batch).unwrap());
                            ok += 1;
                        }
                        other => panic!("unexpected reply {other:?}"),
                    }
                }
                ok
            })
        })
        .collect();
    let total: usize = clients.into_iter().map(|h| h.join().unwrap()).sum();
    assert_eq!(total, 400);
    assert_eq!(server.ledger().requests(), 400);
}

#[test]
fn remote_and_in_process_logits_agree() {
    let model = small_model();
    let server = start(&model);
    let remote = RemoteEvalApi::connect(server.local_addr()).unwrap();
    let local = InProcessApi::new(Arc::clone(&model));
    let t = task(&model, 1);
    let batch = Batch::from_examples(&t.train, 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..30 {
        let prompt = random_prompt(&mut rng, &model);
        let a = remote.evaluate(&prompt, &batch).unwrap();
        let b = local.evaluate(&prompt, &batch).unwrap();
        for (ra, rb) in a.iter().zip(&b) {
            for (x, y) in ra.iter().zip(rb) {
                assert!((x - y).abs() <= 1e-6, "{x} vs {y}");
            }
        }
    }
    assert_eq!(remote.calls(), local.calls());
    assert_eq!(remote.shape().unwrap(), local.shape().unwrap());
    assert_eq!(remote.layer_stats(&batch).unwrap(), local.layer_stats(&batch).unwrap());
}

#[test]
fn bad_requests_get_an_error_and_the_connection_survives() {
    let model = small_model();
    let server = start(&model);
    let mut stream = TcpStream::connect(server.local_addr()).unwrap();
    let batch = Batch::from_examples(&task(&model, 2).train, 2).unwrap();
    let shape = InProcessApi::new(Arc::clone(&model)).shape().unwrap();

    codec::write_frame(&mut stream, b"not a message").unwrap();
    let reply = codec::decode(&codec::read_frame(&mut stream).unwrap().unwrap()).unwrap();
    assert!(matches!(
        reply,
        Message::Error {
            code: ErrorCode::Malformed,
            ..
        }
    ));

    let mut truncated = codec::encode(&Message::InferRequest(InferenceRequest::new(
        77,
        batch.clone(),
        PromptPayload::None,
        shape,
    )))
    .unwrap();
    truncated.pop();
    codec::write_frame(&mut stream, &truncated).unwrap();
    let reply = codec::decode(&codec::read_frame(&mut stream).unwrap().unwrap()).unwrap();
    assert!(matches!(
        reply,
        Message::Error {
            request_id: 77,
            code: ErrorCode::Malformed,
            ..
        }
    ));

    let mut unknown_token = batch.clone();
    unknown_token.input_ids[0] = 1000;
    let req = InferenceRequest::new(78, unknown_token, PromptPayload::None, shape);
    let reply = exchange(&mut stream, &Message::InferRequest(req));
    assert!(matches!(
        reply,
        Message::Error {
            request_id: 78,
            code: ErrorCode::Rejected,
            ..
        }
    ));

    let reply = exchange(&mut stream, &Message::DescribeResponse { request_id: 79, shape });
    assert!(matches!(
        reply,
        Message::Error {
            request_id: 79,
            code: ErrorCode::Unsupported,
            ..
        }
    ));

    let req = InferenceRequest::new(80, batch.clone(), PromptPayload::None, shape);
    let reply = exchange(&mut stream, &Message::InferRequest(req));
    assert!(matches!(reply, Message::InferResponse(r) if r.request_id == 80 && r.logits.len() == batch.len()));
}

#[test]
fn rejected_requests_are_not_retried_or_counted() {
    let model = small_model();
    let server = start(&model);
    let remote = RemoteEvalApi::connect(server.local_addr()).unwrap();
    let batch = Batch::from_examples(&task(&model, 3).train, 2).unwrap();
    let err = remote
        .evaluate(&PromptPayload::Input(vec![0.0; 3]), &batch)
        .unwrap_err();
    assert!(!err.is_retryable(), "{err}");
    assert_eq!(remote.calls(), 0);
}

#[test]
fn oversized_batches_are_refused() {
    let model = small_model();
    let server = serve(Arc::clone(&model), "127.0.0.1:0", ServerConfig { max_batch: 4 }).unwrap();
    let remote = RemoteEvalApi::connect(server.local_addr()).unwrap();
    let t = task(&model, 4);
    let small = Batch::from_examples(&t.train[..4], 2).unwrap();
    let big = Batch::from_examples(&t.train, 2).unwrap();
    assert!(remote.evaluate(&PromptPayload::None, &small).is_ok());
    assert!(!remote.evaluate(&PromptPayload::None, &big).unwrap_err().is_retryable());
}

/// Counts every byte that passes through the wrapped stream.
struct Counting<S> {
    inner: S,
    read: Arc<AtomicUsize>,
    written: Arc<AtomicUsize>,
}

impl<S: Read> Read for Counting<S> {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        let n = self.inner.read(buf)?;
        self.read.fetch_add(n, Ordering::SeqCst);
        Ok(n)
    }
}

impl<S: Write> Write for Counting<S> {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        let n = self.inner.write(buf)?;
        self.written.fetch_add(n, Ordering::SeqCst);
        Ok(n)
    }

    fn flush(&mut self) -> io::Result<()> {
        self.inner.flush()
    }
}

#[test]
fn ledger_matches_bytes_on_the_wire() {
    let model = small_model();
    let server = start(&model);
    let stream = TcpStream::connect(server.local_addr()).unwrap();
    let read = Arc::new(AtomicUsize::new(0));
    let written = Arc::new(AtomicUsize::new(0));
    let mut w = Counting {
        inner: stream.try_clone().unwrap(),
        read: Arc::clone(&read),
        written: Arc::clone(&written),
    };
    let mut r = BufReader::new(Counting {
        inner: stream,
        read: Arc::clone(&read),
        written: Arc::clone(&written),
    });
    let shape = InProcessApi::new(Arc::clone(&model)).shape().unwrap();
    let t = task(&model, 5);
    let batch = Batch::from_examples(&t.train, 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut msgs = vec![
        codec::encode(&Message::DescribeRequest { request_id: 1 }).unwrap(),
        codec::encode(&Message::StatsRequest {
            request_id: 2,
            batch: batch.clone(),
        })
        .unwrap(),
        b"garbage".to_vec(),
    ];
    for i in 0..20 {
        let req = InferenceRequest::new(10 + i, batch.clone(), random_prompt(&mut rng, &model), shape);
        msgs.push(codec::encode(&Message::InferRequest(req)).unwrap());
    }
    for m in &msgs {
        codec::write_frame(&mut w, m).unwrap();
        codec::read_frame(&mut r).unwrap().unwrap();
    }
    let up = server.ledger().upload_bytes() + server.control_ledger().upload_bytes();
    let down = server.ledger().download_bytes() + server.control_ledger().download_bytes();
    assert_eq!(up as usize, written.load(Ordering::SeqCst));
    assert_eq!(down as usize, read.load(Ordering::SeqCst));
    assert_eq!(server.ledger().requests(), 20);
    assert_eq!(server.control_ledger().requests(), 3);
}

#[test]
fn sst2_shaped_request_ledger() {
    // n_p * H = 500 values, the size of a d = 500 prompt.
    let model = Arc::new(
        ToyModel::new(ToyConfig {
            vocab: 200,
            hidden: 50,
            layers: 2,
            prompt_len: 10,
            key_dim: 8,
            ffn_dim: 16,
            label_words: 2,
            ..ToyConfig::default()
        })
        .unwrap(),
    );
    let server = start(&model);
    let remote = RemoteEvalApi::connect(server.local_addr()).unwrap();
    let (n, seq) = (32, 47);
    let batch = Batch {
        seq_len: seq,
        input_ids: (0..n * seq)
            .map(|i| {
                if i % seq == seq - 1 {
                    MASK_ID
                } else {
                    5 + (i % 190) as u32
                }
            })
            .collect(),
        attention_mask: vec![true; n * seq],
        mask_positions: vec![seq - 1; n],
        num_labels: 2,
    };
    remote.evaluate(&PromptPayload::Input(vec![0.01; 500]), &batch).unwrap();
    let header = FRAME_PREFIX_LEN + MESSAGE_HEADER_LEN + INFER_HEADER_LEN;
    let upload = 3008 + 1504 + 2000 + 2 * n + header;
    let download = 256 + FRAME_PREFIX_LEN + MESSAGE_HEADER_LEN + codec::RESPONSE_HEADER_LEN;
    for ledger in [server.ledger(), remote.ledger()] {
        assert_eq!(ledger.upload_bytes() as usize, upload);
        assert_eq!(ledger.download_bytes() as usize, download);
        assert_eq!(ledger.requests(), 1);
    }
}

fn run_cfg(budget: u64, population: usize) -> RunConfig {
    RunConfig {
        budget,
        subspace_dim: 8,
        population: Some(population),
        patience: None,
        seed: 4,
        ..RunConfig::default()
    }
}

#[test]
fn remote_run_ledger_is_per_request_size_times_calls() {
    let model = small_model();
    let server = start(&model);
    let remote = RemoteEvalApi::connect(server.local_addr()).unwrap();
    let t = task(&model, 6);
    let train = Batch::from_examples(&t.train, 2).unwrap();
    let dev = Batch::from_examples(&t.dev, 2).unwrap();
    let stats = remote.layer_stats(&train).unwrap();
    let cfg = run_cfg(1000, 20);
    let out = run_bbt(&remote, &t, &stats[0], &cfg).unwrap();
    assert_eq!(out.history.train_calls, 1000);

    let shape = remote.shape().unwrap();
    let prompt = PromptPayload::Input(vec![0.0; shape.values_per_layer()]);
    let train_frame = InferenceRequest::new(0, train.clone(), prompt.clone(), shape).frame_len();
    let dev_frame = InferenceRequest::new(0, dev.clone(), prompt, shape).frame_len();
    let reply =
        |b: &Batch| (FRAME_PREFIX_LEN + MESSAGE_HEADER_LEN + codec::RESPONSE_HEADER_LEN + b.len() * 2 * 4) as u64;
    let (tc, dc) = (out.history.train_calls, out.history.dev_calls);
    let ledger = remote.ledger().totals();
    assert_eq!(ledger.requests, tc + dc);
    assert_eq!(ledger.upload_bytes, tc * train_frame as u64 + dc * dev_frame as u64);
    assert_eq!(ledger.download_bytes, tc * reply(&train) + dc * reply(&dev));
    assert_eq!(server.ledger().totals(), ledger);
    assert_eq!(remote.calls(), tc + dc);
}

#[test]
fn remote_bbtv2_run_matches_in_process() {
    let model = small_model();
    let server = start(&model);
    let remote = RemoteEvalApi::connect(server.local_addr()).unwrap();
    let local = InProcessApi::new(Arc::clone(&model));
    let t = task(&model, 7);
    let train = Batch::from_examples(&t.train, 2).unwrap();
    let cfg = RunConfig {
        parallel: true,
        ..run_cfg(600, 5)
    };
    let a = run_bbtv2(&remote, &t, &remote.layer_stats(&train).unwrap()[1..], &cfg).unwrap();
    let b = run_bbtv2(&local, &t, &local.layer_stats(&train).unwrap()[1..], &cfg).unwrap();
    assert_eq!(a.history.losses(), b.history.losses());
    assert_eq!(a.best, b.best);
    assert_eq!(remote.calls(), local.calls());
}

#[test]
fn killing_the_server_aborts_the_run_with_partial_history() {
    let model = small_model();
    let server = start(&model);
    let remote = Arc::new(RemoteEvalApi::with_timeout(server.local_addr(), Some(Duration::from_secs(5))).unwrap());
    let t = task(&model, 8);
    let stats = remote.layer_stats(&Batch::from_examples(&t.train, 2).unwrap()).unwrap();

    let killer = {
        let remote = Arc::clone(&remote);
        std::thread::spawn(move || {
            let deadline = std::time::Instant::now() + Duration::from_secs(60);
            while remote.calls() < 100 && std::time::Instant::now() < deadline {
                std::thread::sleep(Duration::from_millis(1));
            }
            server.shutdown();
        })
    };
    let cfg = RunConfig {
        max_retries: 2,
        ..run_cfg(1_000_000, 5)
    };
    let err = run_bbtv2(remote.as_ref(), &t, &stats[1..], &cfg).unwrap_err();
    killer.join().unwrap();
    match err {
        RunError::Aborted { error, history } => {
            assert!(error.is_retryable(), "{error}");
            assert!(history.train_calls >= 90 && history.train_calls < 1_000_000);
            assert_eq!(history.records.len() as u64, history.train_calls);
            assert!(history.losses().iter().all(|l| l.is_finite()));
        }
        other => panic!("expected an abort, got {other}"),
    }
}

#[test]
fn connecting_to_nothing_is_a_transport_error() {
    let addr = {
        let l = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        l.local_addr().unwrap()
    };
    let err = RemoteEvalApi::connect(addr).err().expect("nothing is listening");
    assert!(err.is_retryable());
}
