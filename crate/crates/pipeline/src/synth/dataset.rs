//! On-disk dataset layout: one directory per patient holding
//! `arteries/NNN.vol`, `myo.vol`, `myo.mask` and a `meta` file of
//! `key=value` lines.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::cohort::{PatientPlan, PatientRecord, FFR_THRESHOLD};
use super::geometry::{ArteryGeometry, Stenosis};
use crate::error::{io_err, Error, Result};
use crate::io::Volume;

pub const META_FILE: &str = "meta";
pub const MYO_VOLUME_FILE: &str = "myo.vol";
pub const MYO_MASK_FILE: &str = "myo.mask";
pub const ARTERY_DIR: &str = "arteries";

pub fn patient_dir(root: &Path, id: usize) -> PathBuf {
    root.join(format!("patient_{id:04}"))
}

pub fn artery_file(patient: &Path, index: usize) -> PathBuf {
    patient.join(ARTERY_DIR).join(format!("{index:03}.vol"))
}

pub fn format_meta(plan: &PatientPlan) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "patient_id={}", plan.id);
    let _ = writeln!(s, "seed={}", plan.seed);
    let _ = writeln!(s, "arteries={}", plan.arteries.len());
    for (i, (a, f)) in plan.arteries.iter().zip(&plan.ffr).enumerate() {
        let _ = writeln!(s, "ffr.{i:03}={f}");
        let _ = writeln!(s, "artery.{i:03}.length={}", a.length);
        let _ = writeln!(s, "artery.{i:03}.r0={}", a.r0);
        let _ = writeln!(s, "artery.{i:03}.taper={}", a.taper);
        let _ = writeln!(s, "artery.{i:03}.territory={}", a.territory);
        let lesions: Vec<String> = a
            .stenoses
            .iter()
            .map(|st| format!("{},{},{},{}", st.center, st.length_mm, st.r_min, st.calcified as u8))
            .collect();
        let _ = writeln!(s, "artery.{i:03}.stenoses={}", lesions.join(";"));
    }
    let _ = writeln!(s, "min_ffr={}", plan.min_ffr);
    let _ = writeln!(s, "label={}", plan.label as u8);
    s
}

pub fn parse_meta(text: &str) -> std::result::Result<PatientPlan, String> {
    let mut kv = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| format!("line {}: expected key=value", n + 1))?;
        kv.insert(k.trim().to_string(), v.trim().to_string());
    }
    fn get<'a>(kv: &'a BTreeMap<String, String>, k: &str) -> std::result::Result<&'a str, String> {
        kv.get(k).map(String::as_str).ok_or_else(|| format!("missing key `{k}`"))
    }
    fn num<T: std::str::FromStr>(kv: &BTreeMap<String, String>, k: &str) -> std::result::Result<T, String> {
        get(kv, k)?.parse().map_err(|_| format!("bad value for `{k}`"))
    }
    let n: usize = num(&kv, "arteries")?;
    let mut arteries = Vec::with_capacity(n);
    let mut ffr = Vec::with_capacity(n);
    for i in 0..n {
        ffr.push(num(&kv, &format!("ffr.{i:03}"))?);
        let stenoses = get(&kv, &format!("artery.{i:03}.stenoses"))?
            .split(';')
            .filter(|s| !s.is_empty())
            .map(|s| {
                let f: Vec<&str> = s.split(',').collect();
                if f.len() != 4 {
                    return Err(format!("artery {i}: malformed stenosis `{s}`"));
                }
                let p = |x: &str| x.parse::<f64>().map_err(|_| format!("artery {i}: bad number `{x}`"));
                Ok(Stenosis {
                    center: p(f[0])?,
                    length_mm: p(f[1])?,
                    r_min: p(f[2])?,
                    calcified: f[3] == "1",
                })
            })
            .collect::<std::result::Result<Vec<_>, _>>()?;
        arteries.push(ArteryGeometry {
            length: num(&kv, &format!("artery.{i:03}.length"))?,
            r0: num(&kv, &format!("artery.{i:03}.r0"))?,
            taper: num(&kv, &format!("artery.{i:03}.taper"))?,
            stenoses,
            territory: num(&kv, &format!("artery.{i:03}.territory"))?,
        });
    }
    let min_ffr: f64 = num(&kv, "min_ffr")?;
    let label: u8 = num(&kv, "label")?;
    if (label == 1) != (min_ffr <= FFR_THRESHOLD) {
        return Err("label inconsistent with min_ffr".into());
    }
    Ok(PatientPlan {
        id: num(&kv, "patient_id")?,
        seed: num(&kv, "seed")?,
        arteries,
        ffr,
        min_ffr,
        label: label == 1,
    })
}

pub fn write_patient(root: &Path, rec: &PatientRecord) -> Result<PathBuf> {
    let dir = patient_dir(root, rec.plan.id);
    let adir = dir.join(ARTERY_DIR);
    fs::create_dir_all(&adir).map_err(io_err(&adir))?;
    for (i, v) in rec.mprs.iter().enumerate() {
        v.save(&artery_file(&dir, i))?;
    }
    rec.myocardium.save(&dir.join(MYO_VOLUME_FILE))?;
    rec.mask.save(&dir.join(MYO_MASK_FILE))?;
    let meta = dir.join(META_FILE);
    fs::write(&meta, format_meta(&rec.plan)).map_err(io_err(&meta))?;
    Ok(dir)
}

pub fn read_meta(dir: &Path) -> Result<PatientPlan> {
    let path = dir.join(META_FILE);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    parse_meta(&text).map_err(|reason| Error::Format { path, reason })
}

pub fn read_patient(dir: &Path) -> Result<PatientRecord> {
    let plan = read_meta(dir)?;
    let mprs = (0..plan.arteries.len())
        .map(|i| Volume::load(&artery_file(dir, i)))
        .collect::<Result<Vec<_>>>()?;
    Ok(PatientRecord {
        plan,
        mprs,
        myocardium: Volume::load(&dir.join(MYO_VOLUME_FILE))?,
        mask: Volume::load(&dir.join(MYO_MASK_FILE))?,
    })
}

/// Patient directories under `root`, sorted by name.
pub fn list_patients(root: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(io_err(root))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_dir()
                && p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with("patient_"))
        })
        .collect();
    dirs.sort();
    Ok(dirs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::cohort::{plan_patient, CohortConfig};
    use crate::synth::geometry::FfrConstants;

    #[test]
    fn meta_roundtrip_is_exact() {
        let plan = plan_patient(&CohortConfig::default(), 3, 12345, &FfrConstants::default());
        let text = format_meta(&plan);
        assert_eq!(parse_meta(&text).unwrap(), plan);
    }

    #[test]
    fn inconsistent_label_rejected() {
        let plan = plan_patient(&CohortConfig::default(), 3, 12345, &FfrConstants::default());
        let flipped = format_meta(&plan).replace(
            &format!("label={}", plan.label as u8),
            &format!("label={}", !plan.label as u8),
        );
        assert!(parse_meta(&flipped).is_err());
    }
}
