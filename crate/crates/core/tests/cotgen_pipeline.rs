use std::collections::BTreeSet;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use simseg::cotgen::*;
use simseg::Error;

fn sample(id: &str, modality: Modality) -> SampleInput {
    SampleInput {
        image_id: id.into(),
        question: "What does the image show?".into(),
        modality,
        diagnosis: "pneumonia".into(),
    }
}

fn reject(class: FailureClass) -> String {
    format!("The reasoning has a problem: `{}`.\nFinal decision: [reject]", class.name())
}

const PASS: &str = "All criteria met.\nFinal decision: [pass]";

#[test]
fn state_machine_over_classes_and_round_limits() {
    for class in FailureClass::ALL {
        for max_rounds in 1..=3 {
            // Rejected every round: the record goes to human review.
            let mut medical = MockAssistant::new((0..max_rounds).map(|r| format!("answer {r}")));
            let mut critic = MockAssistant::new((0..max_rounds).map(|_| reject(class)));
            let rec = run_pipeline(&sample("a", Modality::Dermoscopy), &mut medical, &mut critic, max_rounds, &FixedClock(5)).unwrap();
            assert_eq!(rec.status, RecordStatus::HumanReview);
            assert_eq!(rec.rounds, max_rounds);
            assert_eq!(rec.cot, format!("answer {}", max_rounds - 1));
            assert_eq!((rec.started_ms, rec.finished_ms), (5, 5));
            for h in &rec.history {
                let RoundOutcome::Reviewed { verdict } = h else { panic!("{h:?}") };
                assert_eq!((verdict.decision, verdict.failure), (Decision::Reject, Some(class)));
            }
            // Every regeneration carries the previous failure class.
            let prompts: Vec<&str> = medical.requests().iter().map(|r| r.prompt.as_str()).collect();
            assert!(!prompts[0].contains(CORRECTION_HEADER));
            for p in &prompts[1..] {
                assert!(p[p.find(CORRECTION_HEADER).unwrap()..].contains(class.name()));
            }
            assert_eq!(medical.remaining() + critic.remaining(), 0);

            // Rejected until the last allowed round, then approved.
            let mut medical = MockAssistant::new((0..max_rounds).map(|r| format!("answer {r}")));
            let mut critic =
                MockAssistant::new((0..max_rounds).map(|r| if r + 1 == max_rounds { PASS.to_string() } else { reject(class) }));
            let rec = run_pipeline(&sample("b", Modality::Endoscopy), &mut medical, &mut critic, max_rounds, &FixedClock(0)).unwrap();
            assert_eq!(rec.status, RecordStatus::Approved);
            assert_eq!(rec.rounds, max_rounds);
        }
    }
}

#[test]
fn early_pass_stops_the_loop() {
    let mut medical = MockAssistant::new(["first", "second", "third"]);
    let mut critic = MockAssistant::new([PASS, PASS, PASS]);
    let rec = run_pipeline(&sample("c", Modality::XRay), &mut medical, &mut critic, 3, &FixedClock(1)).unwrap();
    assert_eq!((rec.status, rec.rounds, rec.cot.as_str()), (RecordStatus::Approved, 1, "first"));
    assert_eq!(medical.remaining(), 2);
    assert_eq!(critic.requests()[0].role, Role::Critic);
    assert!(critic.requests()[0].prompt.starts_with("Input: first"));
}

#[test]
fn unparseable_review_goes_to_human_review() {
    let mut medical = MockAssistant::new(["x", "y"]);
    let mut critic = MockAssistant::new(["looks fine to me", PASS]);
    let rec = run_pipeline(&sample("d", Modality::Ultrasound), &mut medical, &mut critic, 3, &FixedClock(0)).unwrap();
    assert_eq!(rec.status, RecordStatus::HumanReview);
    assert!(matches!(&rec.history[..], [RoundOutcome::Unparseable { raw }] if raw == "looks fine to me"));
    assert!(matches!(parse_verdict("Final decision: [pass]/[reject]"), Err(Error::UnparseableVerdict)));
}

#[test]
fn exhausted_script_is_an_io_error_naming_the_sample() {
    let mut medical = MockAssistant::new(["only"]);
    let mut critic = MockAssistant::new([reject(FailureClass::FactualError)]);
    let err = run_pipeline(&sample("e7", Modality::Dermoscopy), &mut medical, &mut critic, 2, &FixedClock(0)).unwrap_err();
    assert!(matches!(err, Error::PipelineIo { ref sample_id, .. } if sample_id == "e7"));
}

/// Serves one canned response per connection, recording request bodies.
fn serve(responses: Vec<(u16, String)>) -> (String, Arc<Mutex<Vec<String>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/chat", listener.local_addr().unwrap());
    let bodies = Arc::new(Mutex::new(Vec::new()));
    let seen = Arc::clone(&bodies);
    std::thread::spawn(move || {
        for (status, body) in responses {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut length = 0;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if line == "\r\n" || line.is_empty() {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    length = v.trim().parse().unwrap();
                }
            }
            let mut request = vec![0; length];
            reader.read_exact(&mut request).unwrap();
            seen.lock().unwrap().push(String::from_utf8(request).unwrap());
            let mut stream = stream;
            write!(
                stream,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            )
            .unwrap();
        }
    });
    (url, bodies)
}

#[test]
fn http_assistant_posts_json_and_retries() {
    let reply = serde_json::json!({ "text": "Final decision: [pass]" }).to_string();
    let (url, bodies) = serve(vec![(500, "{}".into()), (200, reply)]);
    let mut client = HttpAssistant::new(url, Duration::from_secs(5), 1);
    let request = AssistantRequest {
        role: Role::Critic,
        prompt: "Input: hello".into(),
        sample_id: "s1".into(),
    };
    assert_eq!(client.respond(&request).unwrap(), "Final decision: [pass]");
    let bodies = bodies.lock().unwrap();
    assert_eq!(bodies.len(), 2);
    let sent: AssistantRequest = serde_json::from_str(&bodies[1]).unwrap();
    assert_eq!(sent, request);
}

#[test]
fn http_failures_surface_as_pipeline_errors() {
    let (url, _) = serve(vec![(503, "{}".into()), (503, "{}".into())]);
    let mut medical = HttpAssistant::new(url, Duration::from_secs(5), 1);
    let mut critic = MockAssistant::new([PASS]);
    let err = run_pipeline(&sample("h1", Modality::Dermoscopy), &mut medical, &mut critic, 3, &FixedClock(0)).unwrap_err();
    assert!(matches!(err, Error::PipelineIo { ref sample_id, .. } if sample_id == "h1"));
}

fn approved(n: usize) -> Vec<CoTRecord> {
    (0..n)
        .map(|i| {
            let mut medical = MockAssistant::new(["cot"]);
            let mut critic = MockAssistant::new([PASS]);
            let modality = Modality::ALL[i % Modality::ALL.len()];
            run_pipeline(&sample(&format!("id{i:03}"), modality), &mut medical, &mut critic, 1, &FixedClock(0)).unwrap()
        })
        .collect()
}

#[test]
fn packaging_splits_ten_records_eight_one_one() {
    let mut records = approved(10);
    let mut rejected = records[0].clone();
    rejected.sample_id = "zz-rejected".into();
    rejected.status = RecordStatus::HumanReview;
    records.push(rejected);
    let m = package_dataset(&records, SplitRatios::default(), 3).unwrap();
    assert_eq!((m.train.len(), m.val.len(), m.test.len()), (8, 1, 1));
    let all: BTreeSet<&String> = m.train.iter().chain(&m.val).chain(&m.test).collect();
    assert_eq!(all.len(), 10);
    assert!(!all.contains(&"zz-rejected".to_string()));
    assert_eq!(m.modalities.values().map(|c| c.total).sum::<usize>(), 10);
    assert!(m.modalities.values().all(|c| c.train + c.val + c.test == c.total));

    // Input order does not matter; the seed does.
    let mut reversed = records.clone();
    reversed.reverse();
    assert_eq!(package_dataset(&reversed, SplitRatios::default(), 3).unwrap(), m);
    let other = package_dataset(&records, SplitRatios::default(), 4).unwrap();
    assert_ne!((&other.train, &other.val), (&m.train, &m.val));
}

#[test]
fn packaging_rejects_bad_input() {
    let bad = SplitRatios { train: 0.7, val: 0.1, test: 0.1 };
    assert!(package_dataset(&approved(3), bad, 0).is_err());
    let negative = SplitRatios { train: 1.2, val: -0.1, test: -0.1 };
    assert!(negative.validate().is_err());
    let mut held = approved(2);
    for r in &mut held {
        r.status = RecordStatus::HumanReview;
    }
    assert!(matches!(package_dataset(&held, SplitRatios::default(), 0), Err(Error::EmptyDataset)));
}

#[test]
fn batch_writes_records_and_review_queue() {
    let dir = tempfile::tempdir().unwrap();
    let samples = [sample("p1", Modality::Dermoscopy), sample("p2", Modality::Endoscopy)];
    let mut medical = MockAssistant::new(["a", "b"]);
    let mut critic = MockAssistant::new([PASS.to_string(), reject(FailureClass::MissingStep)]);
    let records = run_batch(&samples, &mut medical, &mut critic, 1, &FixedClock(9), dir.path()).unwrap();
    let all: Vec<CoTRecord> = read_ndjson(&std::fs::read_to_string(dir.path().join(RECORDS_FILE)).unwrap()).unwrap();
    let queue: Vec<CoTRecord> = read_ndjson(&std::fs::read_to_string(dir.path().join(HUMAN_REVIEW_FILE)).unwrap()).unwrap();
    assert_eq!(all, records);
    assert_eq!(queue.len(), 1);
    assert_eq!(queue[0].sample_id, "p2");
}
