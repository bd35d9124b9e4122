#![allow(dead_code)]

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::thread::JoinHandle;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use e2t_core::embedder::EmbeddingVector;

/// Straightforward sequential clustering: recompute every centroid and
/// representative from scratch for each incoming vector.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleCluster {
    pub id: u64,
    pub members: Vec<(u64, Vec<f32>)>,
}

fn naive_dot(a: &[f32], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += f64::from(a[i]) * b[i];
    }
    s
}

fn naive_cos(a: &[f32], b: &[f64]) -> f64 {
    let na = naive_dot(a, &a.iter().map(|&x| f64::from(x)).collect::<Vec<_>>()).sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (naive_dot(a, b) / (na * nb)).clamp(-1.0, 1.0)
}

impl OracleCluster {
    pub fn centroid(&self) -> Vec<f64> {
        let d = self.members[0].1.len();
        let mut c = vec![0.0f64; d];
        for (_, v) in &self.members {
            for i in 0..d {
                c[i] += f64::from(v[i]);
            }
        }
        let m = self.members.len() as f64;
        c.iter().map(|x| x / m).collect()
    }

    pub fn representative(&self) -> u64 {
        let c = self.centroid();
        let mut best: Option<(f64, u64)> = None;
        for (id, v) in &self.members {
            let s = naive_cos(v, &c);
            best = match best {
                None => Some((s, *id)),
                Some((bs, bid)) if s > bs || (s == bs && *id < bid) => Some((s, *id)),
                keep => keep,
            };
        }
        best.expect("non-empty cluster").1
    }
}

pub fn oracle_dedup(stream: &[(u64, Vec<f32>)], tau: f64) -> Vec<OracleCluster> {
    let mut clusters: Vec<OracleCluster> = Vec::new();
    for (id, v) in stream {
        let mut best: Option<(usize, f64)> = None;
        for (k, c) in clusters.iter().enumerate() {
            let rep = c.representative();
            let rv: Vec<f64> = c
                .members
                .iter()
                .find(|m| m.0 == rep)
                .expect("representative is a member")
                .1
                .iter()
                .map(|&x| f64::from(x))
                .collect();
            let s = naive_cos(v, &rv);
            if best.is_none_or(|(_, bs)| s > bs) {
                best = Some((k, s));
            }
        }
        match best {
            Some((k, s)) if s > tau => clusters[k].members.push((*id, v.clone())),
            _ => clusters.push(OracleCluster {
                id: clusters.len() as u64,
                members: vec![(*id, v.clone())],
            }),
        }
    }
    clusters
}

/// Random unit vectors scattered around a few prototypes, with verbatim repeats.
pub fn random_stream(rng: &mut ChaCha8Rng, dim: usize, len: usize) -> Vec<(u64, EmbeddingVector)> {
    let protos: Vec<Vec<f64>> = (0..rng.gen_range(1..6))
        .map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    let mut out: Vec<(u64, EmbeddingVector)> = Vec::with_capacity(len);
    for id in 0..len as u64 {
        if !out.is_empty() && rng.gen_bool(0.2) {
            let prev = out[rng.gen_range(0..out.len())].1.clone();
            out.push((id, prev));
            continue;
        }
        let p = &protos[rng.gen_range(0..protos.len())];
        let noise = [0.02, 0.1, 0.3, 1.0][rng.gen_range(0..4)];
        let v: Vec<f64> = p.iter().map(|x| x + rng.gen_range(-noise..noise)).collect();
        if v.iter().all(|x| *x == 0.0) {
            continue;
        }
        out.push((id, EmbeddingVector::normalized(&v)));
    }
    out
}

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Probability a random positive outranks a random negative, by enumeration.
pub fn brute_auc(pairs: &[(f64, bool)]) -> Option<f64> {
    let pos: Vec<f64> = pairs.iter().filter(|p| p.1).map(|p| p.0).collect();
    let neg: Vec<f64> = pairs.iter().filter(|p| !p.1).map(|p| p.0).collect();
    if pos.is_empty() || neg.is_empty() {
        return None;
    }
    let mut wins = 0.0;
    for &p in &pos {
        for &n in &neg {
            if p > n {
                wins += 1.0;
            } else if p == n {
                wins += 0.5;
            }
        }
    }
    Some(wins / (pos.len() * neg.len()) as f64)
}

/// Precision at each positive's rank; ranking picks the highest remaining
/// score, earliest input first.
pub fn brute_ap(pairs: &[(f64, bool)]) -> Option<f64> {
    let total = pairs.iter().filter(|p| p.1).count();
    if total == 0 {
        return None;
    }
    let mut used = vec![false; pairs.len()];
    let mut hits = 0usize;
    let mut sum = 0.0;
    for rank in 1..=pairs.len() {
        let mut pick = None;
        for i in 0..pairs.len() {
            if !used[i] && pick.is_none_or(|j: usize| pairs[i].0 > pairs[j].0) {
                pick = Some(i);
            }
        }
        let i = pick.expect("items remain");
        used[i] = true;
        if pairs[i].1 {
            hits += 1;
            sum += hits as f64 / rank as f64;
        }
    }
    Some(sum / total as f64)
}

/// Loopback HTTP server answering every request with `status` and `body`.
/// Returns the base URL and a handle yielding the request bodies it saw.
pub fn mock_http(status: u16, body: String, requests: usize) -> (String, JoinHandle<Vec<String>>) {
    let listener = TcpListener::bind("127.0.0.1:0").expect("bind loopback");
    let url = format!("http://{}", listener.local_addr().expect("local addr"));
    let handle = std::thread::spawn(move || {
        let mut seen = Vec::new();
        for stream in listener.incoming().take(requests) {
            let mut stream = stream.expect("accept");
            let mut reader = BufReader::new(stream.try_clone().expect("clone stream"));
            let mut length = 0usize;
            loop {
                let mut line = String::new();
                if reader.read_line(&mut line).expect("read header") == 0 || line == "\r\n" {
                    break;
                }
                if let Some((k, v)) = line.split_once(':') {
                    if k.eq_ignore_ascii_case("content-length") {
                        length = v.trim().parse().expect("numeric content-length");
                    }
                }
            }
            let mut buf = vec![0u8; length];
            reader.read_exact(&mut buf).expect("read body");
            seen.push(String::from_utf8_lossy(&buf).into_owned());
            let reason = if status == 200 { "OK" } else { "Error" };
            let response = format!(
                "HTTP/1.1 {status} {reason}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            );
            stream.write_all(response.as_bytes()).expect("write response");
        }
        seen
    });
    (url, handle)
}

/// A loopback URL nothing is listening on.
pub fn dead_url() -> String {
    let listener = TcpListener::bind("127.0.0.1:0").expect("bind loopback");
    let addr = listener.local_addr().expect("local addr");
    drop(listener);
    format!("http://{addr}")
}
