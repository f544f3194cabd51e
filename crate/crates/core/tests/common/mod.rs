//! Synthetic data and brute-force reference implementations shared by the
//! integration tests and the acceptance suite.
#![allow(dead_code)]

use std::cmp::Ordering;

use cirloop::composer::{Caption, Composer, ToyComposer};
use cirloop::engine::{GallerySet, QueryTriplet};
use cirloop::forge::{make_generation_manifest, BenchmarkManifest, CaptionTriplet, Category, GenerationManifest};
use cirloop::gallery::{EmbeddingGallery, EmbeddingVector, GalleryEntry};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_unit(rng: &mut impl Rng, d: usize) -> Vec<f32> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            return v.iter().map(|x| (x / n) as f32).collect();
        }
    }
}

pub fn image_id(i: usize) -> String {
    format!("g{i:04}")
}

/// `n` random unit vectors of dimension `d`, ids `g0000`, `g0001`, ...
pub fn random_gallery(seed: u64, n: usize, d: usize) -> EmbeddingGallery {
    let mut r = rng(seed);
    let entries = (0..n)
        .map(|i| GalleryEntry::new(image_id(i), EmbeddingVector::new(random_unit(&mut r, d)).unwrap()))
        .collect();
    EmbeddingGallery::new(format!("rand{seed}"), entries).unwrap()
}

/// Like `random_gallery` but roughly a fifth of the rows copy an earlier
/// row, so exact score ties are common.
pub fn gallery_with_ties(seed: u64, n: usize, d: usize) -> EmbeddingGallery {
    let mut r = rng(seed);
    let mut rows: Vec<Vec<f32>> = Vec::with_capacity(n);
    for _ in 0..n {
        if !rows.is_empty() && r.random_range(0..5) == 0 {
            let j = r.random_range(0..rows.len());
            rows.push(rows[j].clone());
        } else {
            rows.push(random_unit(&mut r, d));
        }
    }
    // Shuffle ids so tie order is not the insertion order.
    let mut ids: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        ids.swap(i, r.random_range(0..=i));
    }
    let entries = rows
        .into_iter()
        .zip(ids)
        .map(|(v, i)| GalleryEntry::new(image_id(i), EmbeddingVector::new(v).unwrap()))
        .collect();
    EmbeddingGallery::new(format!("ties{seed}"), entries).unwrap()
}

pub fn triplet(id: &str, reference: &str, target: &str, caption: &str) -> QueryTriplet {
    QueryTriplet {
        triplet_id: id.to_string(),
        reference_id: reference.to_string(),
        target_ids: vec![target.to_string()],
        relative_caption: Caption::new(caption).unwrap(),
        category: None,
        hard_negative_ids: vec![],
    }
}

/// `count` triplets over a gallery of `n` images with distinct reference and target.
pub fn random_triplets(seed: u64, count: usize, n: usize) -> Vec<QueryTriplet> {
    let mut r = rng(seed);
    (0..count)
        .map(|i| {
            let a = r.random_range(0..n);
            let mut b = r.random_range(0..n);
            while b == a {
                b = r.random_range(0..n);
            }
            triplet(
                &format!("q{i:04}"),
                &image_id(a),
                &image_id(b),
                &format!("make it look like sample {i}"),
            )
        })
        .collect()
}

pub fn toy(seed: u64, beta: f64) -> Composer {
    Composer::Toy(ToyComposer::new(seed, beta).unwrap())
}

/// Brute-force ranking: score every entry, full comparison sort by score
/// descending then id ascending.
pub fn naive_rank(query: &[f32], gallery: &EmbeddingGallery, excluded: &[&str]) -> Vec<(String, f64)> {
    let mut all: Vec<(String, f64)> = Vec::new();
    for e in gallery.entries() {
        if excluded.contains(&e.image_id.as_str()) {
            continue;
        }
        let mut s = 0.0f64;
        for (a, b) in query.iter().zip(e.vector.as_slice()) {
            s += *a as f64 * *b as f64;
        }
        all.push((e.image_id.clone(), s));
    }
    // Insertion sort: deliberately unrelated to the library's sort.
    for i in 1..all.len() {
        let mut j = i;
        while j > 0 && before(&all[j], &all[j - 1]) {
            all.swap(j, j - 1);
            j -= 1;
        }
    }
    all
}

fn before(a: &(String, f64), b: &(String, f64)) -> bool {
    match a.1.partial_cmp(&b.1).unwrap() {
        Ordering::Greater => true,
        Ordering::Less => false,
        Ordering::Equal => a.0 < b.0,
    }
}

/// Hits@K by enumeration over rank lists (carrying the last round forward).
pub fn oracle_hits(ranks: &[Vec<usize>], k: usize, round: usize) -> f64 {
    if ranks.is_empty() {
        return 0.0;
    }
    let mut hit = 0usize;
    for series in ranks {
        let mut found = false;
        for (i, &r) in series.iter().enumerate() {
            if i < round && r <= k {
                found = true;
            }
        }
        if found {
            hit += 1;
        }
    }
    hit as f64 * 100.0 / ranks.len() as f64
}

pub fn oracle_recall(ranks: &[Vec<usize>], k: usize, round: usize) -> f64 {
    if ranks.is_empty() {
        return 0.0;
    }
    let mut hit = 0usize;
    for series in ranks {
        let idx = if round <= series.len() { round - 1 } else { series.len() - 1 };
        if series[idx] <= k {
            hit += 1;
        }
    }
    hit as f64 * 100.0 / ranks.len() as f64
}

pub fn random_rank_lists(seed: u64, count: usize, rounds: usize, n: usize) -> Vec<Vec<usize>> {
    let mut r = rng(seed);
    (0..count)
        .map(|_| {
            let len = r.random_range(1..=rounds);
            (0..len).map(|_| r.random_range(1..=n)).collect()
        })
        .collect()
}

/// A benchmark that satisfies the default shape: 200 triplets per category,
/// each subset backed by its own 600-image gallery (reference, target and
/// hard negative per triplet). Complex captions have 30 words.
pub fn compliant_benchmark(d: usize) -> (BenchmarkManifest, GallerySet, GenerationManifest) {
    let mut set = GallerySet::default();
    let mut triplets = Vec::new();
    let mut captions = Vec::new();
    for (ci, cat) in Category::ALL.into_iter().enumerate() {
        let name = cat.as_str();
        let mut r = rng(ci as u64);
        let entries = (0..600)
            .map(|i| GalleryEntry::new(format!("{name}-{i:03}"), EmbeddingVector::new(random_unit(&mut r, d)).unwrap()))
            .collect();
        set.insert(EmbeddingGallery::new(name, entries).unwrap());
        set.map_category(name, name);
        for j in 0..200 {
            let text = if cat == Category::Complex {
                (0..30).map(|w| format!("w{w}")).collect::<Vec<_>>().join(" ")
            } else {
                format!("{name} edit number {j}")
            };
            let tid = format!("{name}-t{j:03}");
            triplets.push(QueryTriplet {
                triplet_id: tid.clone(),
                reference_id: format!("{name}-{:03}", 3 * j),
                target_ids: vec![format!("{name}-{:03}", 3 * j + 1)],
                relative_caption: Caption::new(text.clone()).unwrap(),
                category: Some(name.to_string()),
                hard_negative_ids: vec![format!("{name}-{:03}", 3 * j + 2)],
            });
            captions.push(CaptionTriplet {
                triplet_id: tid,
                category: cat,
                reference_caption: format!("a photo {j}"),
                relative_caption: text,
                target_caption: format!("an edited photo {j}"),
                hard_negative_caption: Some(format!("a near miss {j}")),
            });
        }
    }
    let generation = make_generation_manifest(&captions, 7, "diffusion-test").unwrap();
    (BenchmarkManifest { triplets }, set, generation)
}

/// A local JSON endpoint for exercising remote providers. The handler gets
/// the request path, the decoded body and the 0-based call number.
pub struct Mock {
    pub url: String,
    pub calls: std::sync::Arc<std::sync::atomic::AtomicUsize>,
    pub bodies: std::sync::Arc<std::sync::Mutex<Vec<(String, serde_json::Value)>>>,
    server: std::sync::Arc<tiny_http::Server>,
    worker: Option<std::thread::JoinHandle<()>>,
}

impl Mock {
    pub fn start<F>(handler: F) -> Self
    where
        F: Fn(&str, &serde_json::Value, usize) -> (u16, serde_json::Value) + Send + 'static,
    {
        use std::sync::atomic::Ordering;
        let server = std::sync::Arc::new(tiny_http::Server::http("127.0.0.1:0").unwrap());
        let url = format!("http://{}", server.server_addr().to_ip().unwrap());
        let calls = std::sync::Arc::new(std::sync::atomic::AtomicUsize::new(0));
        let bodies = std::sync::Arc::new(std::sync::Mutex::new(Vec::new()));
        let worker = {
            let (server, calls, bodies) = (server.clone(), calls.clone(), bodies.clone());
            std::thread::spawn(move || {
                for mut req in server.incoming_requests() {
                    let mut raw = String::new();
                    let _ = std::io::Read::read_to_string(req.as_reader(), &mut raw);
                    let body: serde_json::Value = serde_json::from_str(&raw).unwrap_or(serde_json::Value::Null);
                    let path = req.url().to_string();
                    let n = calls.fetch_add(1, Ordering::SeqCst);
                    bodies.lock().unwrap().push((path.clone(), body.clone()));
                    let (status, out) = handler(&path, &body, n);
                    let resp = tiny_http::Response::from_string(out.to_string()).with_status_code(status);
                    let _ = req.respond(resp);
                }
            })
        };
        Self {
            url,
            calls,
            bodies,
            server,
            worker: Some(worker),
        }
    }

    pub fn count(&self) -> usize {
        self.calls.load(std::sync::atomic::Ordering::SeqCst)
    }
}

impl Drop for Mock {
    fn drop(&mut self) {
        self.server.unblock();
        if let Some(w) = self.worker.take() {
            let _ = w.join();
        }
    }
}

/// An address nothing listens on.
pub fn dead_endpoint() -> String {
    let l = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = l.local_addr().unwrap();
    drop(l);
    format!("http://{addr}")
}

pub fn fast_retry(max_retries: u32) -> cirloop::http::RetryPolicy {
    cirloop::http::RetryPolicy {
        timeout_secs: 5.0,
        max_retries,
        initial_backoff_ms: 1,
        max_backoff_ms: 4,
    }
}
