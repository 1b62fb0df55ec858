#![allow(dead_code)]

use adld::networks::Domain;
use adld::synthdata::{generate, AuSet, DomainConfig, SampleRecord, Split};
use adld::training::{AuLabels, Batch};
use adld::Real;

pub const SIDE: usize = 32;

pub fn records(domain: Domain, n: usize, seed: u64) -> Vec<SampleRecord> {
    let cfg = DomainConfig::new(domain, Split::Train, SIDE, AuSet::Bp4d6);
    generate(&cfg, 0, n, seed).expect("generation")
}

pub fn pair(n: usize) -> (Vec<SampleRecord>, Vec<SampleRecord>) {
    (records(Domain::Source, n, 11), records(Domain::Target, n, 11))
}

pub fn batch(recs: &[SampleRecord], labels: AuLabels) -> Batch<Real> {
    let refs: Vec<&SampleRecord> = recs.iter().collect();
    Batch::assemble(&refs, SIDE / 4, labels, &[]).expect("batch")
}
