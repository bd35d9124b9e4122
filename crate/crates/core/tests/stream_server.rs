use std::io::{Cursor, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::{Arc, Mutex};

use e2t_core::cot::{Reasoner, ThreatLexicon};
use e2t_core::embedder::HashingEncoder;
use e2t_core::event_model::{PipelineConfig, ThreatReport};
use e2t_core::stream::{run_pipeline, serve, Pipeline, PipelineFactory, RunSummary};

fn pipeline(config: &PipelineConfig) -> Pipeline {
    let reasoner = Reasoner::rule_based(ThreatLexicon::default(), config.bands);
    Pipeline::new(config.clone(), Box::new(HashingEncoder::new(config.dim)), reasoner).unwrap()
}

fn frames(n: usize) -> String {
    (0..n)
        .map(|i| {
            let desc = if (i / 20) % 2 == 0 { "a man is walking in a park" } else { "a man is punching a man in a park" };
            format!("{{\"ts\":{},\"frame_id\":{i},\"desc\":\"{desc}\"}}\n", i as f64 / 4.0)
        })
        .collect()
}

#[test]
fn bad_lines_are_counted_and_skipped() {
    let config = PipelineConfig {
        target_fps: 10.0,
        ..PipelineConfig::default()
    };
    let mut input = frames(40);
    input.push_str("not json\n{\"ts\":99.0,\"frame_id\":1}\n\n");
    let mut reports = Vec::new();
    let summary = run_pipeline(Cursor::new(input), pipeline(&config), |r| {
        reports.push(r.report.clone());
        Ok(())
    })
    .unwrap();
    assert_eq!(summary.stats.malformed, 1);
    assert_eq!(summary.stats.missing_content, 1);
    assert_eq!(summary.stats.kept, 40);
    assert_eq!(summary.knowledge_base.cluster_count(), 2);
    assert!(reports.iter().any(|r| r.threat_score > 0.7));
}

#[test]
fn tiny_queue_loses_nothing() {
    let config = PipelineConfig {
        target_fps: 10.0,
        queue_capacity: 1,
        ..PipelineConfig::default()
    };
    let summary = run_pipeline(Cursor::new(frames(200)), pipeline(&config), |_| Ok(())).unwrap();
    assert_eq!(summary.stats.kept, 200);
    assert_eq!(summary.knowledge_base.event_count(), 200);
}

#[test]
fn server_runs_one_pipeline_per_connection() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let config = PipelineConfig {
        target_fps: 10.0,
        ..PipelineConfig::default()
    };
    let factory: Arc<PipelineFactory> = {
        let config = config.clone();
        Arc::new(move || Ok(pipeline(&config)))
    };
    let out = Arc::new(Mutex::new(Vec::<u8>::new()));
    let sink: Arc<Mutex<dyn Write + Send>> = out.clone();
    let finished = Arc::new(Mutex::new(Vec::new()));
    let on_finished = {
        let finished = Arc::clone(&finished);
        Arc::new(move |s: RunSummary| finished.lock().unwrap().push(s.knowledge_base.event_count()))
    };
    let server = std::thread::spawn(move || serve(listener, factory, sink, 2, Some(2), on_finished));

    for n in [30, 50] {
        let mut c = TcpStream::connect(addr).unwrap();
        c.write_all(frames(n).as_bytes()).unwrap();
    }
    server.join().unwrap().unwrap();

    let mut counts = finished.lock().unwrap().clone();
    counts.sort_unstable();
    assert_eq!(counts, vec![30, 50]);
    let text = String::from_utf8(out.lock().unwrap().clone()).unwrap();
    let reports: Vec<ThreatReport> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert!(!reports.is_empty());
    assert!(reports.iter().all(|r| (0.0..=1.0).contains(&r.threat_score)));
}
