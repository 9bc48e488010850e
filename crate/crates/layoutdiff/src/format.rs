//! Line-oriented corpus format: one JSON scene per line.
//!
//! ```text
//! {"objects":[{"class":"bed","tier":"primary","t":[x,y,z],"s":[hx,hy,hz],"theta":0.0}, ...],
//!  "graph":{"edges":[[src,dst,rel], ...]},
//!  "room_mask":{"h":64,"w":64,"rle":[zeros,ones,zeros,...]},
//!  "text":"...","source":"...","frame":{"center":[x,y,z],"scale":s}}
//! ```
//!
//! Geometry is stored in world meters. Primary objects come first, in slot
//! order; graph vertex `i` is the `i`-th primary object. Layout slot fields are
//! `[0, C)` class one-hot, `C..C+3` translation, `C+3..C+6` half-size,
//! `C+6..C+8` (cos, sin).

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use layoutdiff_core::generator::prompt_vocabulary;
use layoutdiff_core::{
    Caps, CategoryTaxonomy, Edge, Frame, ObjectRecord, RoomMask, Scene, SceneGraph, Tier,
};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ObjectLine {
    class: String,
    tier: String,
    t: [f64; 3],
    s: [f64; 3],
    theta: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GraphLine {
    edges: Vec<[u32; 3]>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MaskLine {
    h: usize,
    w: usize,
    rle: Vec<u32>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FrameLine {
    center: [f64; 3],
    scale: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneLine {
    objects: Vec<ObjectLine>,
    graph: GraphLine,
    room_mask: MaskLine,
    text: String,
    source: String,
    frame: FrameLine,
}

/// Serializes one scene (world frame) to a single JSON line without the newline.
pub fn scene_to_line(scene: &Scene, taxonomy: &CategoryTaxonomy) -> Result<String> {
    let object = |o: &ObjectRecord, tier: Tier| -> Result<ObjectLine> {
        let class = taxonomy
            .name(o.class)
            .ok_or(layoutdiff_core::Error::UnknownClass {
                index: o.class,
                classes: taxonomy.num_real_classes(),
            })?;
        Ok(ObjectLine {
            class: class.to_string(),
            tier: tier.as_str().to_string(),
            t: o.translation,
            s: o.half_size,
            theta: o.theta,
        })
    };
    let mut objects = Vec::with_capacity(scene.primary.len() + scene.secondary.len());
    for o in &scene.primary {
        objects.push(object(o, Tier::Primary)?);
    }
    for o in &scene.secondary {
        objects.push(object(o, Tier::Secondary)?);
    }
    let line = SceneLine {
        objects,
        graph: GraphLine {
            edges: scene
                .graph
                .edges
                .iter()
                .map(|e| [e.src as u32, e.dst as u32, e.relation as u32])
                .collect(),
        },
        room_mask: MaskLine {
            h: scene.room_mask.height,
            w: scene.room_mask.width,
            rle: scene.room_mask.to_rle(),
        },
        text: scene.text.clone(),
        source: scene.source.clone(),
        frame: FrameLine {
            center: scene.frame.center,
            scale: scene.frame.scale,
        },
    };
    serde_json::to_string(&line).map_err(|e| Error::Parse {
        line: 0,
        message: e.to_string(),
    })
}

/// Parses and validates one line. `line_no` is 1-based and only used in errors.
pub fn scene_from_line(text: &str, line_no: usize, taxonomy: &CategoryTaxonomy) -> Result<Scene> {
    let bad = |message: String| Error::Parse {
        line: line_no,
        message,
    };
    let rec: SceneLine = serde_json::from_str(text).map_err(|e| bad(e.to_string()))?;
    let mut primary = Vec::new();
    let mut secondary = Vec::new();
    for o in &rec.objects {
        let class = taxonomy
            .index_of(&o.class)
            .map_err(|e| bad(e.to_string()))?;
        let tier = Tier::parse(&o.tier).ok_or_else(|| bad(format!("unknown tier {:?}", o.tier)))?;
        if taxonomy.tier_of(class)? != tier {
            return Err(bad(format!("class {} is not {}", o.class, o.tier)));
        }
        if o.s.iter().any(|&s| !(s > 0.0)) || !o.theta.is_finite() {
            return Err(bad(format!("invalid geometry for {}", o.class)));
        }
        if o.t.iter().any(|t| !t.is_finite()) {
            return Err(bad(format!("invalid translation for {}", o.class)));
        }
        let obj = ObjectRecord::new(class, o.t, o.s, o.theta);
        match tier {
            Tier::Primary if !secondary.is_empty() => {
                return Err(bad("primary objects must precede secondary ones".into()))
            }
            Tier::Primary => primary.push(obj),
            Tier::Secondary => secondary.push(obj),
        }
    }
    let mut edges = Vec::with_capacity(rec.graph.edges.len());
    for &[src, dst, rel] in &rec.graph.edges {
        if rel > u8::MAX as u32 {
            return Err(bad(format!("relation type {rel}")));
        }
        edges.push(Edge {
            src: src as usize,
            dst: dst as usize,
            relation: rel as u8,
        });
    }
    let graph = SceneGraph::new(&primary, edges).map_err(|e| bad(e.to_string()))?;
    let room_mask = RoomMask::from_rle(rec.room_mask.h, rec.room_mask.w, &rec.room_mask.rle)
        .map_err(|e| bad(e.to_string()))?;
    let frame = Frame {
        center: rec.frame.center,
        scale: rec.frame.scale,
    };
    frame.validate().map_err(|e| bad(e.to_string()))?;
    Ok(Scene {
        primary,
        secondary,
        graph,
        room_mask,
        text: rec.text,
        source: rec.source,
        frame,
    })
}

pub fn write_scenes(path: &Path, scenes: &[Scene], taxonomy: &CategoryTaxonomy) -> Result<()> {
    let mut out = Vec::new();
    for s in scenes {
        out.extend_from_slice(scene_to_line(s, taxonomy)?.as_bytes());
        out.push(b'\n');
    }
    write_file(path, &out)
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(bytes).map_err(io_err(path))
}

/// Reads every scene of a corpus file. Blank lines are skipped.
pub fn read_scenes(path: &Path, taxonomy: &CategoryTaxonomy) -> Result<Vec<Scene>> {
    let f = fs::File::open(path).map_err(io_err(path))?;
    let mut scenes = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        scenes.push(scene_from_line(&line, i + 1, taxonomy)?);
    }
    Ok(scenes)
}

/// Prompt vocabulary shipped next to a corpus, one token per line.
pub fn write_vocab(path: &Path, taxonomy: &CategoryTaxonomy) -> Result<()> {
    let mut text = prompt_vocabulary(taxonomy).join("\n");
    text.push('\n');
    write_file(path, text.as_bytes())
}

pub fn read_vocab(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    Ok(text
        .lines()
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect())
}

#[derive(Debug, Clone)]
pub struct CorpusSplit {
    pub train: Vec<Scene>,
    pub val: Vec<Scene>,
    /// Scenes dropped by the cap filter.
    pub filtered: usize,
}

/// Reads, filters and splits a corpus. The shuffle depends only on `seed` and
/// the surviving scene count.
pub fn load_corpus(
    path: &Path,
    split_ratio: f64,
    seed: u64,
    caps: Caps,
    taxonomy: &CategoryTaxonomy,
) -> Result<CorpusSplit> {
    if !(0.0..=1.0).contains(&split_ratio) {
        return Err(Error::Config(format!(
            "split ratio {split_ratio} outside [0, 1]"
        )));
    }
    let all = read_scenes(path, taxonomy)?;
    Ok(split_corpus(all, split_ratio, seed, caps))
}

pub fn split_corpus(all: Vec<Scene>, split_ratio: f64, seed: u64, caps: Caps) -> CorpusSplit {
    let before = all.len();
    let mut kept: Vec<Scene> = all
        .into_iter()
        .filter(|s| caps.admits(s.primary.len(), s.secondary.len()))
        .collect();
    let filtered = before - kept.len();
    if filtered > 0 {
        log::warn!("{filtered} scenes exceed the object caps and were dropped");
    }
    kept.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (split_ratio * kept.len() as f64).round() as usize;
    let val = kept.split_off(n_train.min(kept.len()));
    CorpusSplit {
        train: kept,
        val,
        filtered,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use layoutdiff_core::generator::{generate_indexed, RoomType};

    #[test]
    fn line_round_trip_is_byte_exact() {
        let tax = CategoryTaxonomy::desk();
        for i in 0..20 {
            let s = generate_indexed(i, 4, &RoomType::ALL, Caps::default(), &tax)
                .unwrap()
                .scene;
            let line = scene_to_line(&s, &tax).unwrap();
            let back = scene_from_line(&line, 1, &tax).unwrap();
            assert_eq!(back, s);
            assert_eq!(scene_to_line(&back, &tax).unwrap(), line);
        }
    }

    #[test]
    fn malformed_lines_report_position() {
        let tax = CategoryTaxonomy::desk();
        let err = scene_from_line("{\"objects\": 3}", 7, &tax).unwrap_err();
        assert!(err.to_string().starts_with("line 7:"), "{err}");
        let s = generate_indexed(0, 1, &RoomType::ALL, Caps::default(), &tax)
            .unwrap()
            .scene;
        let line = scene_to_line(&s, &tax)
            .unwrap()
            .replacen("\"bed\"", "\"piano\"", 1);
        if line.contains("piano") {
            assert!(scene_from_line(&line, 2, &tax).is_err());
        }
    }
}
