//! Synthetic corpora and the experiment protocols run on them.
//!
//! Benign programs come from a seeded structured-code generator. Infected
//! programs are benign hosts with a payload method injected, after the
//! payload went through a pipeline of [`Transform`]s. Every program's role
//! and ground truth is recorded in a [`CorpusManifest`].

mod generate;
mod protocols;
mod transform;

use std::fs;
use std::path::Path;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cfg::fnv1a_64;
use crate::classifiers::derive_seed;
use crate::listing::{serialize_oplist, MethodListing, ProgramLabel, ProgramListing};

pub use generate::{synthesize_benign, synthesize_payload, BenignParams, PayloadParams, BENIGN_PALETTE, PAYLOAD_SLOTS};
pub use protocols::{
    benchmark_corpus, lab_corpus, realstyle_corpus, run_benchmark, run_laboratory, run_realstyle, BenchmarkSpec,
    Dictionary, DictionaryResult, FamilySpec, LabReport, LabSpec, PipelineParams, RealStyleReport, RealStyleSpec,
    VariantResult,
};
pub use transform::{
    apply_transforms, chains, pad_nops, reorder_blocks, split_payload, substitute_opcodes, Transform, EQUIVALENT_OPCODES,
};

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("invalid harness spec: {0}")]
    Spec(String),
    #[error(transparent)]
    Feature(#[from] crate::features::FeatureError),
    #[error(transparent)]
    Classifier(#[from] crate::classifiers::ClassifierError),
    #[error(transparent)]
    Signature(#[from] crate::signature::SignatureError),
    #[error(transparent)]
    Match(#[from] crate::matcher::MatchError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Name of the opcode planted in the host as the payload's call site.
pub const CALL_SITE_OPCODE: &str = "invoke-static";

/// Adds the transformed payload to `host` as extra methods and plants a
/// call-site opcode before the final instruction of one host method. The
/// transform randomness depends only on `seed`, so every host injected
/// with the same seed carries the same variant; the call-site method also
/// depends on the host id.
pub fn inject(
    host: &ProgramListing,
    payload: &MethodListing,
    transforms: &[Transform],
    family: &str,
    seed: u64,
) -> Result<ProgramListing, HarnessError> {
    if payload.is_empty() {
        return Err(HarnessError::Spec("payload is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x7a));
    let methods = apply_transforms(payload, transforms, &mut rng);
    Ok(inject_methods(host, &methods, family, seed))
}

/// Injection of already transformed payload methods.
pub fn inject_methods(host: &ProgramListing, payload: &[MethodListing], family: &str, seed: u64) -> ProgramListing {
    let mut out = host.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, fnv1a_64(host.program_id.as_bytes())));
    if !out.methods.is_empty() {
        let target = rng.random_range(0..out.methods.len());
        out.methods[target] = plant_call(&out.methods[target]);
    }
    for m in payload {
        let mut m = m.clone();
        m.program_id = out.program_id.clone();
        out.methods.push(m);
    }
    out.label = ProgramLabel::Malware(family.to_string());
    out
}

fn plant_call(method: &MethodListing) -> MethodListing {
    let at = method.len() - 1;
    let mut parts: Vec<(String, Vec<usize>)> = Vec::with_capacity(method.len() + 1);
    for ins in &method.instructions {
        if ins.index == at {
            parts.push((CALL_SITE_OPCODE.to_string(), Vec::new()));
        }
        let targets = ins.branch_targets.iter().map(|&t| if t > at { t + 1 } else { t }).collect();
        parts.push((ins.mnemonic().to_string(), targets));
    }
    MethodListing::from_parts(method.program_id.clone(), method.method_id.clone(), parts).expect("call site keeps listing valid")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    BenignOriginal,
    BenignExtra,
    Infected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub program_id: String,
    pub role: Role,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub family: Option<String>,
    /// Variant number within the family.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variant: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub host: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantInfo {
    pub family: String,
    pub variant: usize,
    pub payload_methods: Vec<String>,
    pub transforms: Vec<Transform>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub seed: u64,
    pub entries: Vec<ManifestEntry>,
    pub variants: Vec<VariantInfo>,
}

impl CorpusManifest {
    pub fn count(&self, role: Role) -> usize {
        self.entries.iter().filter(|e| e.role == role).count()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    /// Checks the manifest against the programs it describes.
    pub fn check(&self, programs: &[ProgramListing]) -> Result<(), String> {
        if programs.len() != self.entries.len() {
            return Err(format!("{} programs, {} manifest entries", programs.len(), self.entries.len()));
        }
        for (p, e) in programs.iter().zip(&self.entries) {
            if p.program_id != e.program_id {
                return Err(format!("program `{}` listed as `{}`", p.program_id, e.program_id));
            }
            match e.role {
                Role::Infected => {
                    let family = e.family.as_deref().ok_or_else(|| format!("`{}` has no family", e.program_id))?;
                    if p.label.family() != Some(family) {
                        return Err(format!("`{}` is labeled {}, manifest says {family}", p.program_id, p.label));
                    }
                    let info = self
                        .variants
                        .iter()
                        .find(|v| v.family == family && Some(v.variant) == e.variant)
                        .ok_or_else(|| format!("`{}` names an unknown variant", e.program_id))?;
                    if !info.payload_methods.iter().all(|m| p.methods.iter().any(|pm| &pm.method_id == m)) {
                        return Err(format!("`{}` lacks its payload methods", e.program_id));
                    }
                }
                Role::BenignOriginal | Role::BenignExtra => {
                    if p.label != ProgramLabel::Clean {
                        return Err(format!("benign `{}` is labeled {}", p.program_id, p.label));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Writes every program as `<id>.oplist` plus `manifest.json` into `dir`.
pub fn write_corpus(dir: &Path, programs: &[ProgramListing], manifest: &CorpusManifest) -> Result<(), HarnessError> {
    fs::create_dir_all(dir)?;
    for p in programs {
        fs::write(dir.join(format!("{}.oplist", p.program_id)), serialize_oplist(p))?;
    }
    fs::write(dir.join("manifest.json"), manifest.to_json() + "\n")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cfg::build_program_cfgs;

    #[test]
    fn identity_injection_keeps_payload_blocks() {
        let host = &synthesize_benign(1, "app", &BenignParams::default(), 1).unwrap()[0];
        let payload = synthesize_payload("payload_main", &PayloadParams::default(), 2).unwrap();
        let infected = inject(host, &payload, &[], "fam", 3).unwrap();
        assert_eq!(infected.label, ProgramLabel::Malware("fam".into()));
        assert_eq!(infected.methods.len(), host.methods.len() + 1);
        let last = infected.methods.last().unwrap();
        assert_eq!(last.mnemonics(), payload.mnemonics());
        let planted = infected.methods.iter().zip(&host.methods).filter(|(a, b)| a != b).count();
        assert_eq!(planted, 1);
        assert_eq!(infected.instruction_count(), host.instruction_count() + payload.len() + 1);
        let before: Vec<_> = build_program_cfgs(host).iter().map(|g| g.node_count()).collect();
        let after: Vec<_> = build_program_cfgs(&infected).iter().map(|g| g.node_count()).collect();
        assert_eq!(&after[..before.len()], &before[..]);
    }

    #[test]
    fn same_seed_same_variant_across_hosts() {
        let hosts = synthesize_benign(2, "app", &BenignParams::default(), 1).unwrap();
        let payload = synthesize_payload("payload_main", &PayloadParams::default(), 2).unwrap();
        let t = [Transform::OpcodeSubstitution { rate: 0.3 }, Transform::NopPadding { rate: 0.1 }];
        let a = inject(&hosts[0], &payload, &t, "fam", 9).unwrap();
        let b = inject(&hosts[1], &payload, &t, "fam", 9).unwrap();
        assert_eq!(a.methods.last().unwrap().mnemonics(), b.methods.last().unwrap().mnemonics());
    }

    #[test]
    fn empty_payload_is_rejected() {
        let host = &synthesize_benign(1, "app", &BenignParams::default(), 1).unwrap()[0];
        let empty = MethodListing { program_id: "p".into(), method_id: "m".into(), instructions: Vec::new() };
        assert!(inject(host, &empty, &[], "fam", 0).is_err());
    }
}
