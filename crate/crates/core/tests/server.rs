//! Model server over real sockets.

use std::collections::{BTreeMap, HashSet};
use std::sync::Arc;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use v2r_core::executors::{
    Executor, ExecutorError, FnExecutor, HistogramEmbedding, SyntheticLatency,
    SyntheticLatencyParams,
};
use v2r_core::matching::read_feature_file;
use v2r_core::server::protocol::{codes, InferRequestMsg, Message, WireRequest};
use v2r_core::server::{
    serve, Client, ClientError, FileIndexSink, ModelService, ServerConfig, ServerHandle,
};
use v2r_core::tensor::Tensor;

const DIM: u32 = 32;

fn embedder() -> Arc<dyn Executor> {
    Arc::new(
        HistogramEmbedding::with_input_spec(5, DIM, "u8:batch,4,4,3".parse().unwrap()).unwrap(),
    )
}

fn start(service: ModelService, workers: usize) -> ServerHandle {
    let config = ServerConfig {
        bind: "127.0.0.1:0".into(),
        workers,
        ..Default::default()
    };
    serve(config, Arc::new(service), None).unwrap()
}

fn image(rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::u8(vec![4, 4, 3], (0..48).map(|_| rng.gen()).collect()).unwrap()
}

#[test]
fn eight_clients_hundred_requests_each() {
    let dir = tempfile::tempdir().unwrap();
    let sink_path = dir.path().join("features.hyfv");
    let sink = Arc::new(FileIndexSink::open(&sink_path, DIM, None).unwrap());
    let server = start(
        ModelService::new(Some(sink)).with_model("emb", embedder()),
        2,
    );
    let addr = server.local_addr();

    let handles: Vec<_> = (0..8u64)
        .map(|c| {
            std::thread::spawn(move || {
                let mut rng = ChaCha8Rng::seed_from_u64(c);
                let mut client = Client::connect(addr).unwrap();
                // Pipeline all 100 before reading any reply.
                let mut sent = BTreeMap::new();
                for i in 0..100u64 {
                    let id = c * 1000 + i;
                    let msg = Message::InferRequest(InferRequestMsg {
                        model_id: "emb".into(),
                        requests: vec![WireRequest {
                            request_id: id,
                            tensor: image(&mut rng),
                        }],
                    });
                    sent.insert(client.send(&msg).unwrap(), id);
                }
                let mut outputs = Vec::new();
                for _ in 0..100 {
                    let (corr, msg) = client.recv().unwrap();
                    let Message::InferResponse(r) = msg else {
                        panic!("unexpected {msg:?}")
                    };
                    assert_eq!(r.outputs.len(), 1);
                    assert_eq!(r.outputs[0].request_id, sent.remove(&corr).unwrap());
                    outputs.extend(r.outputs);
                }
                assert!(sent.is_empty());
                outputs
            })
        })
        .collect();
    let outputs: Vec<_> = handles
        .into_iter()
        .flat_map(|h| h.join().unwrap())
        .collect();
    assert_eq!(outputs.len(), 800);
    assert_eq!(server.served(), 800);
    server.shutdown();

    // The sink file holds exactly the features the clients received.
    let (dim, stored) = read_feature_file(&sink_path).unwrap();
    assert_eq!(dim, DIM);
    assert_eq!(stored.len(), 800);
    let by_id: BTreeMap<u64, _> = stored.into_iter().map(|f| (f.id, f)).collect();
    for o in &outputs {
        let f = o.feature.as_ref().unwrap();
        assert_eq!(f.id, o.request_id);
        assert!(by_id[&o.request_id].bit_eq(f));
    }
}

#[test]
fn multi_request_batch_keeps_order() {
    let server = start(ModelService::new(None).with_model("emb", embedder()), 1);
    let mut client = Client::connect(server.local_addr()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let ids = [42u64, 7, 1_000_000, 3];
    let out = client
        .infer("emb", ids.iter().map(|&id| (id, image(&mut rng))).collect())
        .unwrap();
    assert_eq!(out.iter().map(|o| o.request_id).collect::<Vec<_>>(), ids);
}

#[test]
fn failing_model_does_not_affect_others() {
    let broken: Arc<dyn Executor> = Arc::new(FnExecutor::new(
        "u8:batch,4,4,3".parse().unwrap(),
        None,
        |_| Err(ExecutorError::Failed("out of device memory".into())),
    ));
    let service = ModelService::new(None)
        .with_model("emb", embedder())
        .with_model("broken", broken);
    let server = start(service, 2);
    let mut client = Client::connect(server.local_addr()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);

    for round in 0..3 {
        match client.infer("broken", vec![(1, image(&mut rng)), (2, image(&mut rng))]) {
            Err(ClientError::Remote(e)) => {
                assert_eq!(e.code, codes::EXECUTOR_FAILURE);
                assert_eq!(e.request_ids, vec![1, 2]);
            }
            other => panic!("round {round}: {other:?}"),
        }
        let ok = client.infer("emb", vec![(10, image(&mut rng))]).unwrap();
        assert_eq!(ok[0].request_id, 10);
    }
    match client.infer(
        "nope",
        vec![
            (4, image(&mut rng)),
            (5, image(&mut rng)),
            (6, image(&mut rng)),
        ],
    ) {
        Err(ClientError::Remote(e)) => {
            assert_eq!(e.code, codes::UNKNOWN_MODEL);
            assert_eq!(e.request_ids, vec![4, 5, 6]);
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn graceful_shutdown_answers_accepted_work() {
    let slow = SyntheticLatency::with_input_spec(
        SyntheticLatencyParams {
            a_ms: 30.0,
            s_ms: 0.0,
            q_ms: 0.0,
            jitter_frac: 0.0,
        },
        0,
        "u8:batch,1".parse().unwrap(),
    )
    .unwrap();
    let server = start(
        ModelService::new(None).with_model("slow", Arc::new(slow)),
        1,
    );
    let mut client = Client::connect(server.local_addr()).unwrap();
    let payload = Tensor::u8(vec![1], vec![0]).unwrap();
    let mut pending = HashSet::new();
    for id in 0..5u64 {
        let msg = Message::InferRequest(InferRequestMsg {
            model_id: "slow".into(),
            requests: vec![WireRequest {
                request_id: id,
                tensor: payload.clone(),
            }],
        });
        pending.insert(client.send(&msg).unwrap());
    }
    // Let the reader pull all five frames into the job queue.
    std::thread::sleep(Duration::from_millis(60));
    let addr = server.local_addr();
    let stopper = std::thread::spawn(move || server.shutdown());
    while !pending.is_empty() {
        let (corr, msg) = client.recv().unwrap();
        assert!(matches!(msg, Message::InferResponse(_)), "{msg:?}");
        assert!(pending.remove(&corr));
    }
    assert!(matches!(
        client.recv(),
        Err(ClientError::Closed) | Err(ClientError::Io(_))
    ));
    stopper.join().unwrap();
    assert!(Client::connect(addr)
        .and_then(|mut c| c.status(1000))
        .is_err());
}
