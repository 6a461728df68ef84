//! Flat `key = value` run configuration with `[section]` headers.
//!
//! Values are stored as text; typed readers check every key of a section they consume and
//! reject the ones they do not know.

use std::cell::RefCell;
use std::collections::BTreeSet;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::sampler::{NormMode, SamplerConfig};
use crate::schedule::{NoiseSchedule, ScheduleKind};
use crate::synth::CorpusSpec;

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RunConfig {
    sections: Vec<(String, Vec<(String, String)>)>,
}

impl RunConfig {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::new();
        let mut current: Option<String> = None;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let at = |msg: String| Error::Config(format!("line {}: {msg}", lineno + 1));
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| at(format!("malformed section header {line:?}")))?
                    .trim();
                if name.is_empty() || cfg.has_section(name) {
                    return Err(at(format!("empty or repeated section [{name}]")));
                }
                cfg.sections.push((name.to_string(), Vec::new()));
                current = Some(name.to_string());
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| at(format!("expected key = value, got {line:?}")))?;
            let (k, v) = (k.trim(), v.trim());
            let section = current
                .as_deref()
                .ok_or_else(|| at(format!("key {k:?} outside of any section")))?;
            if k.is_empty() {
                return Err(at("empty key".into()));
            }
            if cfg.get(section, k).is_some() {
                return Err(at(format!("duplicate key {section}.{k}")));
            }
            cfg.set(section, k, v);
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        super::write_atomic(path, self.to_text().as_bytes())?;
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (i, (name, entries)) in self.sections.iter().enumerate() {
            if i > 0 {
                out.push('\n');
            }
            out.push_str(&format!("[{name}]\n"));
            for (k, v) in entries {
                out.push_str(&format!("{k} = {v}\n"));
            }
        }
        out
    }

    pub fn has_section(&self, name: &str) -> bool {
        self.sections.iter().any(|(n, _)| n == name)
    }

    pub fn section_names(&self) -> impl Iterator<Item = &str> {
        self.sections.iter().map(|(n, _)| n.as_str())
    }

    pub fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.sections
            .iter()
            .find(|(n, _)| n == section)
            .and_then(|(_, e)| e.iter().find(|(k, _)| k == key))
            .map(|(_, v)| v.as_str())
    }

    /// Inserts or replaces a value, creating the section if needed.
    pub fn set(&mut self, section: &str, key: &str, value: impl Display) {
        let value = value.to_string();
        let idx = match self.sections.iter().position(|(n, _)| n == section) {
            Some(i) => i,
            None => {
                self.sections.push((section.to_string(), Vec::new()));
                self.sections.len() - 1
            }
        };
        let entries = &mut self.sections[idx].1;
        match entries.iter_mut().find(|(k, _)| k == key) {
            Some(slot) => slot.1 = value,
            None => entries.push((key.to_string(), value)),
        }
    }

    /// Copies a section from another config, replacing any existing one.
    pub fn copy_section(&mut self, other: &RunConfig, section: &str) {
        self.sections.retain(|(n, _)| n != section);
        if let Some(s) = other.sections.iter().find(|(n, _)| n == section) {
            self.sections.push(s.clone());
        }
    }

    pub fn reader(&self, section: &str) -> Result<SectionReader<'_>> {
        let entries = self
            .sections
            .iter()
            .find(|(n, _)| n == section)
            .map(|(_, e)| e.as_slice())
            .ok_or_else(|| Error::Config(format!("missing section [{section}]")))?;
        Ok(SectionReader {
            name: section.to_string(),
            entries,
            used: RefCell::new(BTreeSet::new()),
        })
    }
}

/// Typed access to one section; [`SectionReader::finish`] rejects keys nobody asked for.
pub struct SectionReader<'a> {
    name: String,
    entries: &'a [(String, String)],
    used: RefCell<BTreeSet<String>>,
}

impl SectionReader<'_> {
    fn raw(&self, key: &str) -> Option<&str> {
        self.used.borrow_mut().insert(key.to_string());
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn req<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: Display,
    {
        let raw = self
            .raw(key)
            .ok_or_else(|| Error::Config(format!("missing key {}.{key}", self.name)))?;
        raw.parse()
            .map_err(|e| Error::Config(format!("bad value {raw:?} for {}.{key}: {e}", self.name)))
    }

    pub fn opt<T: FromStr>(&self, key: &str, default: T) -> Result<T>
    where
        T::Err: Display,
    {
        match self.raw(key) {
            None => Ok(default),
            Some(_) => self.req(key),
        }
    }

    /// Comma-separated list.
    pub fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>>
    where
        T::Err: Display,
    {
        let raw = self
            .raw(key)
            .ok_or_else(|| Error::Config(format!("missing key {}.{key}", self.name)))?;
        raw.split(',')
            .map(|p| p.trim())
            .filter(|p| !p.is_empty())
            .map(|p| {
                p.parse()
                    .map_err(|e| Error::Config(format!("bad list item {p:?} in {}.{key}: {e}", self.name)))
            })
            .collect()
    }

    pub fn finish(self) -> Result<()> {
        let used = self.used.borrow();
        match self.entries.iter().find(|(k, _)| !used.contains(k)) {
            Some((k, _)) => Err(Error::Config(format!("unknown key {}.{k}", self.name))),
            None => Ok(()),
        }
    }
}

/// Formats a list the way [`SectionReader::list`] reads it.
pub fn join_list<T: Display>(items: &[T]) -> String {
    items.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(", ")
}

/// A struct that lives in its own config section.
pub trait ConfigSection: Sized {
    const SECTION: &'static str;

    fn read(r: &SectionReader<'_>) -> Result<Self>;
    fn write(&self, cfg: &mut RunConfig);

    fn from_config(cfg: &RunConfig) -> Result<Self> {
        let r = cfg.reader(Self::SECTION)?;
        let v = Self::read(&r)?;
        r.finish()?;
        Ok(v)
    }
}

impl ConfigSection for CorpusSpec {
    const SECTION: &'static str = "corpus";

    fn read(r: &SectionReader<'_>) -> Result<Self> {
        let spec = CorpusSpec {
            train: r.req("train")?,
            val: r.req("val")?,
            test: r.req("test")?,
            size: r.req("size")?,
            lesion_probability: r.req("lesion_probability")?,
            min_radius: r.req("min_radius")?,
            max_radius: r.req("max_radius")?,
            min_shift0: r.req("min_shift0")?,
            max_shift0: r.req("max_shift0")?,
            min_shift1: r.req("min_shift1")?,
            max_shift1: r.req("max_shift1")?,
            min_axis: r.req("min_axis")?,
            max_axis: r.req("max_axis")?,
            texture_amplitude: r.req("texture_amplitude")?,
            noise_amplitude: r.req("noise_amplitude")?,
            confounder_fraction: r.req("confounder_fraction")?,
            deformation: r.req("deformation")?,
            rim_gain: r.req("rim_gain")?,
            rim_width: r.req("rim_width")?,
            seed: r.req("seed")?,
        };
        spec.validate()?;
        Ok(spec)
    }

    fn write(&self, cfg: &mut RunConfig) {
        let s = Self::SECTION;
        cfg.set(s, "train", self.train);
        cfg.set(s, "val", self.val);
        cfg.set(s, "test", self.test);
        cfg.set(s, "size", self.size);
        cfg.set(s, "lesion_probability", self.lesion_probability);
        cfg.set(s, "min_radius", self.min_radius);
        cfg.set(s, "max_radius", self.max_radius);
        cfg.set(s, "min_shift0", self.min_shift0);
        cfg.set(s, "max_shift0", self.max_shift0);
        cfg.set(s, "min_shift1", self.min_shift1);
        cfg.set(s, "max_shift1", self.max_shift1);
        cfg.set(s, "min_axis", self.min_axis);
        cfg.set(s, "max_axis", self.max_axis);
        cfg.set(s, "texture_amplitude", self.texture_amplitude);
        cfg.set(s, "noise_amplitude", self.noise_amplitude);
        cfg.set(s, "confounder_fraction", self.confounder_fraction);
        cfg.set(s, "deformation", self.deformation);
        cfg.set(s, "rim_gain", self.rim_gain);
        cfg.set(s, "rim_width", self.rim_width);
        cfg.set(s, "seed", self.seed);
    }
}

impl ConfigSection for SamplerConfig {
    const SECTION: &'static str = "sampler";

    fn read(r: &SectionReader<'_>) -> Result<Self> {
        let norm: String = r.req("norm")?;
        Ok(SamplerConfig {
            guidance_scale: r.req("w")?,
            encode_steps: r.req("L")?,
            ddim_steps: r.req("ddim_steps")?,
            percentile: r.req("s")?,
            norm_mode: NormMode::from_str(&norm)?,
        })
    }

    fn write(&self, cfg: &mut RunConfig) {
        let s = Self::SECTION;
        cfg.set(s, "w", self.guidance_scale);
        cfg.set(s, "L", self.encode_steps);
        cfg.set(s, "ddim_steps", self.ddim_steps);
        cfg.set(s, "s", self.percentile);
        cfg.set(
            s,
            "norm",
            match self.norm_mode {
                NormMode::Dynamic => "dynamic",
                NormMode::StaticClip => "static",
                NormMode::None => "none",
            },
        );
    }
}

/// Schedule description as stored in configs: step count plus β layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ScheduleSpec {
    pub steps: usize,
    pub kind: ScheduleKind,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self {
            steps: 1000,
            kind: ScheduleKind::default(),
        }
    }
}

impl ScheduleSpec {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::build(self.steps, self.kind)
    }
}

impl ConfigSection for ScheduleSpec {
    const SECTION: &'static str = "schedule";

    fn read(r: &SectionReader<'_>) -> Result<Self> {
        let steps = r.req("steps")?;
        let kind: String = r.req("kind")?;
        let kind = match kind.as_str() {
            "linear" => ScheduleKind::Linear {
                start: r.req("beta_start")?,
                end: r.req("beta_end")?,
            },
            "constant" => ScheduleKind::Constant(r.req("beta")?),
            other => return Err(Error::Config(format!("unknown schedule kind {other:?}"))),
        };
        Ok(ScheduleSpec { steps, kind })
    }

    fn write(&self, cfg: &mut RunConfig) {
        let s = Self::SECTION;
        cfg.set(s, "steps", self.steps);
        match self.kind {
            ScheduleKind::Linear { start, end } => {
                cfg.set(s, "kind", "linear");
                cfg.set(s, "beta_start", start);
                cfg.set(s, "beta_end", end);
            }
            ScheduleKind::Constant(b) => {
                cfg.set(s, "kind", "constant");
                cfg.set(s, "beta", b);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parse_and_render() {
        let text = "# comment\n[a]\nx = 1\ny = hello world\n\n[b]\nz=2.5\n";
        let c = RunConfig::parse(text).unwrap();
        assert_eq!(c.get("a", "y"), Some("hello world"));
        assert_eq!(c.get("b", "z"), Some("2.5"));
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn parse_errors() {
        assert!(RunConfig::parse("x = 1").is_err());
        assert!(RunConfig::parse("[a]\nx = 1\nx = 2").is_err());
        assert!(RunConfig::parse("[a]\n[a]").is_err());
        assert!(RunConfig::parse("[a]\njunk").is_err());
        assert!(RunConfig::parse("[a\nx=1").is_err());
    }

    #[test]
    fn missing_key_is_named() {
        let mut c = RunConfig::new();
        CorpusSpec::default().write(&mut c);
        let text = c.to_text().replace("texture_amplitude = 0.08\n", "");
        let err = CorpusSpec::from_config(&RunConfig::parse(&text).unwrap()).unwrap_err();
        assert!(err.to_string().contains("corpus.texture_amplitude"), "{err}");
    }

    #[test]
    fn unknown_key_rejected() {
        let mut c = RunConfig::new();
        SamplerConfig::default().write(&mut c);
        c.set("sampler", "bogus", 1);
        let err = SamplerConfig::from_config(&c).unwrap_err();
        assert!(err.to_string().contains("sampler.bogus"), "{err}");
    }

    #[test]
    fn typed_sections_round_trip() {
        let mut c = RunConfig::new();
        let spec = CorpusSpec {
            seed: 42,
            texture_amplitude: 0.1 + 0.2,
            ..CorpusSpec::default()
        };
        spec.write(&mut c);
        SamplerConfig::default().write(&mut c);
        let sched = ScheduleSpec {
            steps: 10,
            kind: ScheduleKind::Constant(0.1),
        };
        sched.write(&mut c);
        let back = RunConfig::parse(&c.to_text()).unwrap();
        assert_eq!(CorpusSpec::from_config(&back).unwrap(), spec);
        assert_eq!(SamplerConfig::from_config(&back).unwrap(), SamplerConfig::default());
        assert_eq!(ScheduleSpec::from_config(&back).unwrap(), sched);
        assert!(ScheduleSpec::default().build().is_ok());
    }

    #[test]
    fn lists() {
        let c = RunConfig::parse("[s]\nw = 0, 1, 1.5\n").unwrap();
        let r = c.reader("s").unwrap();
        assert_eq!(r.list::<f64>("w").unwrap(), vec![0.0, 1.0, 1.5]);
        r.finish().unwrap();
        assert_eq!(join_list(&[0.0, 1.5]), "0, 1.5");
    }

    proptest! {
        #[test]
        fn text_round_trip(
            entries in proptest::collection::vec(("[a-z]{1,6}", "[a-z]{1,8}", "[a-zA-Z0-9.,_-]{0,12}"), 0..20)
        ) {
            let mut c = RunConfig::new();
            for (s, k, v) in &entries {
                c.set(s, k, v);
            }
            let text = c.to_text();
            let back = RunConfig::parse(&text).unwrap();
            prop_assert_eq!(&back, &c);
            prop_assert_eq!(back.to_text(), text);
        }
    }
}
