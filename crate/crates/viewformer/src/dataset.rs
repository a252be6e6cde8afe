//! Episode and token files.
//!
//! An episode file is a little-endian `u32` header `(version, image_size, n, 0)`
//! followed, per view, by the pose as seven `f32` (px, py, pz, qw, qx, qy, qz)
//! and `image_size² · 3` RGB bytes. Token files share the layout with header
//! `(version, k, n, n_lat)` and `k²` `u16` code indices in place of the pixels.
//! A directory holds one file per episode plus `index.csv`.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use viewformer_core::codebook::{Codebook, TokenGrid};
use viewformer_core::image::Image;
use viewformer_core::pose::{CameraPose, Quat};
use viewformer_core::scene::{generate_episode, View};

use crate::config::DataConfig;
use crate::error::{Error, Result};

pub const EPISODE_VERSION: u32 = 1;
pub const TOKEN_VERSION: u32 = 1;
const INDEX: &str = "index.csv";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct IndexRow {
    path: String,
    split: Split,
    seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StoredEpisode {
    pub seed: u64,
    pub split: Split,
    pub views: Vec<View>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub image_size: usize,
    pub episodes: Vec<StoredEpisode>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &StoredEpisode> {
        self.episodes.iter().filter(move |e| e.split == split)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenEpisode {
    pub seed: u64,
    pub split: Split,
    pub views: Vec<(TokenGrid, CameraPose)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenDataset {
    pub k: usize,
    pub n_lat: usize,
    pub episodes: Vec<TokenEpisode>,
}

impl TokenDataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &TokenEpisode> {
        self.episodes.iter().filter(move |e| e.split == split)
    }
}

/// Scene seed of episode `i`. Train episodes take the first indices, so the
/// two splits never share a scene.
pub fn scene_seed(split_seed: u64, i: usize) -> u64 {
    (split_seed << 32) | i as u64
}

/// Renders every episode, writes it under `dir` and returns what a reload
/// would return (pixels are stored as bytes).
pub fn make_dataset(cfg: &DataConfig, dir: &Path) -> Result<Dataset> {
    if cfg.test_scenes > cfg.scenes {
        return Err(Error::Config(format!(
            "{} test scenes out of {}",
            cfg.test_scenes, cfg.scenes
        )));
    }
    fs::create_dir_all(dir.join("episodes")).map_err(Error::io(dir))?;
    let train = cfg.scenes - cfg.test_scenes;
    let mut rows = Vec::with_capacity(cfg.scenes);
    let mut episodes = Vec::with_capacity(cfg.scenes);
    for i in 0..cfg.scenes {
        let seed = scene_seed(cfg.split_seed, i);
        let split = if i < train { Split::Train } else { Split::Test };
        let ep = generate_episode(seed, cfg.views, cfg.image_size)?;
        let views: Vec<View> = ep
            .views
            .into_iter()
            .map(|v| {
                Ok(View {
                    image: Image::from_rgb8(cfg.image_size, &v.image.to_rgb8())?,
                    pose: v.pose,
                })
            })
            .collect::<Result<_>>()?;
        let rel = format!("episodes/{i:05}.ep");
        write_episode(&dir.join(&rel), cfg.image_size, &views)?;
        rows.push(IndexRow { path: rel, split, seed });
        episodes.push(StoredEpisode { seed, split, views });
    }
    write_index(dir, &rows)?;
    Ok(Dataset {
        image_size: cfg.image_size,
        episodes,
    })
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let rows = read_index(dir)?;
    let mut image_size = None;
    let mut episodes = Vec::with_capacity(rows.len());
    for row in rows {
        let path = dir.join(&row.path);
        let (size, views) = read_episode(&path)?;
        if *image_size.get_or_insert(size) != size {
            return Err(Error::format(
                &path,
                format!("image size {size} differs from earlier episodes"),
            ));
        }
        episodes.push(StoredEpisode {
            seed: row.seed,
            split: row.split,
            views,
        });
    }
    let image_size = image_size.ok_or_else(|| Error::format(&dir.join(INDEX), "dataset has no episodes"))?;
    Ok(Dataset { image_size, episodes })
}

pub fn write_episode(path: &Path, image_size: usize, views: &[View]) -> Result<()> {
    let mut buf = header(&[EPISODE_VERSION, image_size as u32, views.len() as u32, 0]);
    for v in views {
        if v.image.size() != image_size {
            return Err(Error::format(
                path,
                format!("view of size {} in a size-{image_size} episode", v.image.size()),
            ));
        }
        put_pose(&mut buf, &v.pose);
        buf.extend_from_slice(&v.image.to_rgb8());
    }
    write_file(path, &buf)
}

pub fn read_episode(path: &Path) -> Result<(usize, Vec<View>)> {
    let bytes = fs::read(path).map_err(Error::io(path))?;
    let mut r = Reader::new(path, &bytes);
    let [version, size, n, _] = r.header()?;
    if version != EPISODE_VERSION {
        return Err(Error::format(path, format!("unsupported episode version {version}")));
    }
    let size = size as usize;
    let mut views = Vec::with_capacity(n as usize);
    for _ in 0..n {
        let pose = r.pose()?;
        let image = Image::from_rgb8(size, r.take(size * size * 3)?)?;
        views.push(View { image, pose });
    }
    r.finish()?;
    Ok((size, views))
}

/// Replaces every image by its token grid; poses pass through unchanged.
pub fn tokenize(codebook: &Codebook<f32>, data: &Dataset, dir: &Path) -> Result<TokenDataset> {
    let cfg = &codebook.config;
    if data.image_size != cfg.image_size {
        return Err(Error::Config(format!(
            "dataset images are {}px, codebook expects {}px",
            data.image_size, cfg.image_size
        )));
    }
    fs::create_dir_all(dir.join("episodes")).map_err(Error::io(dir))?;
    let mut rows = Vec::with_capacity(data.episodes.len());
    let mut episodes = Vec::with_capacity(data.episodes.len());
    for (i, ep) in data.episodes.iter().enumerate() {
        let images: Vec<&Image> = ep.views.iter().map(|v| &v.image).collect();
        let grids = codebook.encode(&images)?;
        let views: Vec<(TokenGrid, CameraPose)> = grids.into_iter().zip(ep.views.iter().map(|v| v.pose)).collect();
        let rel = format!("episodes/{i:05}.tok");
        write_tokens(&dir.join(&rel), cfg.k, cfg.n_lat, &views)?;
        rows.push(IndexRow {
            path: rel,
            split: ep.split,
            seed: ep.seed,
        });
        episodes.push(TokenEpisode {
            seed: ep.seed,
            split: ep.split,
            views,
        });
    }
    write_index(dir, &rows)?;
    Ok(TokenDataset {
        k: cfg.k,
        n_lat: cfg.n_lat,
        episodes,
    })
}

pub fn load_tokens(dir: &Path) -> Result<TokenDataset> {
    let rows = read_index(dir)?;
    let mut shape = None;
    let mut episodes = Vec::with_capacity(rows.len());
    for row in rows {
        let path = dir.join(&row.path);
        let (k, n_lat, views) = read_tokens(&path)?;
        if *shape.get_or_insert((k, n_lat)) != (k, n_lat) {
            return Err(Error::format(&path, "token grid shape differs from earlier episodes"));
        }
        episodes.push(TokenEpisode {
            seed: row.seed,
            split: row.split,
            views,
        });
    }
    let (k, n_lat) = shape.ok_or_else(|| Error::format(&dir.join(INDEX), "token set has no episodes"))?;
    Ok(TokenDataset { k, n_lat, episodes })
}

pub fn write_tokens(path: &Path, k: usize, n_lat: usize, views: &[(TokenGrid, CameraPose)]) -> Result<()> {
    if n_lat > usize::from(u16::MAX) + 1 {
        return Err(Error::Config(format!("{n_lat} codes do not fit in 16-bit indices")));
    }
    let mut buf = header(&[TOKEN_VERSION, k as u32, views.len() as u32, n_lat as u32]);
    for (grid, pose) in views {
        if grid.k() != k {
            return Err(Error::format(path, format!("grid with k={} in a k={k} file", grid.k())));
        }
        put_pose(&mut buf, pose);
        for &i in grid.indices() {
            buf.extend_from_slice(&(i as u16).to_le_bytes());
        }
    }
    write_file(path, &buf)
}

pub fn read_tokens(path: &Path) -> Result<(usize, usize, Vec<(TokenGrid, CameraPose)>)> {
    let bytes = fs::read(path).map_err(Error::io(path))?;
    let mut r = Reader::new(path, &bytes);
    let [version, k, n, n_lat] = r.header()?;
    if version != TOKEN_VERSION {
        return Err(Error::format(path, format!("unsupported token version {version}")));
    }
    let (k, n_lat) = (k as usize, n_lat as usize);
    let mut views = Vec::with_capacity(n as usize);
    for _ in 0..n {
        let pose = r.pose()?;
        let raw = r.take(k * k * 2)?;
        let idx = raw
            .chunks_exact(2)
            .map(|c| usize::from(u16::from_le_bytes([c[0], c[1]])))
            .collect();
        let grid = TokenGrid::new(k, idx, n_lat).map_err(|e| Error::format(path, e.to_string()))?;
        views.push((grid, pose));
    }
    r.finish()?;
    Ok((k, n_lat, views))
}

fn header(fields: &[u32; 4]) -> Vec<u8> {
    fields.iter().flat_map(|f| f.to_le_bytes()).collect()
}

fn put_pose(buf: &mut Vec<u8>, pose: &CameraPose) {
    for v in pose.to_array() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(Error::io(path))?;
    f.write_all(bytes).map_err(Error::io(path))
}

fn write_index(dir: &Path, rows: &[IndexRow]) -> Result<()> {
    let path = dir.join(INDEX);
    let mut w = csv::Writer::from_path(&path).map_err(|e| Error::format(&path, e.to_string()))?;
    for row in rows {
        w.serialize(row).map_err(|e| Error::format(&path, e.to_string()))?;
    }
    w.flush().map_err(Error::io(&path))
}

fn read_index(dir: &Path) -> Result<Vec<IndexRow>> {
    let path = dir.join(INDEX);
    let file = fs::File::open(&path).map_err(Error::io(&path))?;
    csv::Reader::from_reader(file)
        .deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::format(&path, e.to_string()))
}

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(path: &'a Path, bytes: &'a [u8]) -> Self {
        Reader { path, bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        let slice = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| Error::format(self.path, format!("truncated at byte {}", self.bytes.len())))?;
        self.pos = end;
        Ok(slice)
    }

    fn header(&mut self) -> Result<[u32; 4]> {
        let raw = self.take(16)?;
        Ok(std::array::from_fn(|i| {
            u32::from_le_bytes(raw[4 * i..4 * i + 4].try_into().unwrap())
        }))
    }

    fn pose(&mut self) -> Result<CameraPose> {
        let raw = self.take(28)?;
        let v: [f64; 7] =
            std::array::from_fn(|i| f64::from(f32::from_le_bytes(raw[4 * i..4 * i + 4].try_into().unwrap())));
        // kept exactly as stored; renormalising would perturb the bits
        let pose = CameraPose {
            position: [v[0], v[1], v[2]],
            orientation: Quat::new(v[3], v[4], v[5], v[6]),
        };
        if !pose.is_unit() || !pose.position.iter().all(|p| p.is_finite()) {
            return Err(Error::format(self.path, format!("invalid pose {v:?}")));
        }
        Ok(pose)
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::format(
                self.path,
                format!("{} trailing bytes", self.bytes.len() - self.pos),
            ));
        }
        Ok(())
    }
}
