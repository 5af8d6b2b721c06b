use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{SimParams, STREAM_WORLD};
use crate::error::{Error, Result};
use crate::geodata::{BBox, Coord, LatLon, EARTH_RADIUS_M};

/// Equirectangular projection anchored at a reference point; planar
/// coordinates are meters east (`x`) and north (`y`) of the anchor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    origin: LatLon,
    cos_lat: f64,
}

impl Projection {
    pub fn new(origin: LatLon) -> Self {
        Self {
            origin,
            cos_lat: origin.lat.to_radians().cos(),
        }
    }

    pub fn to_plane(&self, p: &LatLon) -> (f64, f64) {
        let x = (p.lon - self.origin.lon).to_radians() * EARTH_RADIUS_M * self.cos_lat;
        let y = (p.lat - self.origin.lat).to_radians() * EARTH_RADIUS_M;
        (x, y)
    }

    pub fn to_lat_lon(&self, x: f64, y: f64) -> LatLon {
        LatLon::new(
            self.origin.lat + (y / EARTH_RADIUS_M).to_degrees(),
            self.origin.lon + (x / (EARTH_RADIUS_M * self.cos_lat)).to_degrees(),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SiteKind {
    Home,
    Work,
    Restaurant,
    Recreation,
}

impl SiteKind {
    pub const ALL: [SiteKind; 4] = [SiteKind::Home, SiteKind::Work, SiteKind::Restaurant, SiteKind::Recreation];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Site {
    pub kind: SiteKind,
    pub lat: f64,
    pub lon: f64,
    /// planar position, meters
    pub x: f64,
    pub y: f64,
    pub capacity: usize,
}

impl Coord for Site {
    fn lat(&self) -> f64 {
        self.lat
    }
    fn lon(&self) -> f64 {
        self.lon
    }
}

impl Site {
    pub fn plane_distance(&self, other: &Site) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// A synthetic city: typed sites inside a bounding box.
#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub bbox: BBox,
    pub projection: Projection,
    sites: Vec<Site>,
    by_kind: [Vec<usize>; 4],
}

impl World {
    /// Assembles a world from explicit sites. Planar coordinates are
    /// recomputed from lat/lon.
    pub fn from_sites(bbox: BBox, mut sites: Vec<Site>) -> Result<Self> {
        bbox.validate()?;
        let projection = Projection::new(bbox.center());
        let mut by_kind: [Vec<usize>; 4] = Default::default();
        for (i, s) in sites.iter_mut().enumerate() {
            if !bbox.contains(s) {
                return Err(Error::Config(format!("site {i} at ({}, {}) is outside the box", s.lat, s.lon)));
            }
            (s.x, s.y) = projection.to_plane(&LatLon::new(s.lat, s.lon));
            by_kind[s.kind as usize].push(i);
        }
        for kind in SiteKind::ALL {
            if by_kind[kind as usize].is_empty() {
                return Err(Error::Config(format!("world has no {kind:?} site")));
            }
        }
        Ok(Self {
            bbox,
            projection,
            sites,
            by_kind,
        })
    }

    pub fn sites(&self) -> &[Site] {
        &self.sites
    }

    pub fn site(&self, i: usize) -> &Site {
        &self.sites[i]
    }

    /// Indices of all sites of `kind`, in creation order.
    pub fn of_kind(&self, kind: SiteKind) -> &[usize] {
        &self.by_kind[kind as usize]
    }

    /// Up to `k` sites of `kind` nearest to the planar point, nearest first.
    pub fn nearest(&self, kind: SiteKind, x: f64, y: f64, k: usize) -> Vec<usize> {
        let mut idx: Vec<(f64, usize)> = self
            .of_kind(kind)
            .iter()
            .map(|&i| ((self.sites[i].x - x).hypot(self.sites[i].y - y), i))
            .collect();
        idx.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        idx.into_iter().take(k).map(|(_, i)| i).collect()
    }
}

/// Sites for `n_agents` agents at `density` sites per 1000 agents.
pub fn site_count(density: f64, n_agents: usize) -> usize {
    let raw = density * n_agents as f64 / 1000.0;
    if raw <= 0.0 {
        0
    } else {
        // absorb representation error such as 5.000000000000001
        (raw - 1e-9).ceil().max(1.0) as usize
    }
}

/// Builds a deterministic world for `n_agents` inside `bbox`.
pub fn build_world(bbox: &BBox, n_agents: usize, params: &SimParams, seed: u64) -> Result<World> {
    bbox.validate()?;
    if n_agents == 0 {
        return Err(Error::Config("world needs at least one agent".into()));
    }
    let projection = Projection::new(bbox.center());
    let (x0, y0) = projection.to_plane(&LatLon::new(bbox.min_lat, bbox.min_lon));
    let (x1, y1) = projection.to_plane(&LatLon::new(bbox.max_lat, bbox.max_lon));

    let mut rng = super::rng(seed, STREAM_WORLD);
    let centers: Vec<(f64, f64)> = (0..params.cluster_count)
        .map(|_| (rng.random_range(x0..=x1), rng.random_range(y0..=y1)))
        .collect();
    let offset = Normal::new(0.0, params.cluster_spread)
        .map_err(|e| Error::InvalidParams(format!("cluster_spread: {e}")))?;

    let place = |rng: &mut ChaCha8Rng| -> (f64, f64) {
        if !centers.is_empty() && rng.random::<f64>() < params.cluster_fraction {
            let (cx, cy) = centers[rng.random_range(0..centers.len())];
            for _ in 0..32 {
                let (x, y) = (cx + offset.sample(rng), cy + offset.sample(rng));
                if (x0..=x1).contains(&x) && (y0..=y1).contains(&y) {
                    return (x, y);
                }
            }
        }
        (rng.random_range(x0..=x1), rng.random_range(y0..=y1))
    };

    let mut sites = Vec::new();
    let mut by_kind: [Vec<usize>; 4] = Default::default();
    for (kind, density) in [
        (SiteKind::Home, params.home_density),
        (SiteKind::Work, params.work_density),
        (SiteKind::Restaurant, params.restaurant_density),
        (SiteKind::Recreation, params.recreation_density),
    ] {
        let count = site_count(density, n_agents);
        if count == 0 {
            return Err(Error::Config(format!(
                "{kind:?} density {density} per 1000 agents yields no sites for {n_agents} agents"
            )));
        }
        let capacity = n_agents.div_ceil(count);
        for _ in 0..count {
            let (x, y) = place(&mut rng);
            let ll = projection.to_lat_lon(x, y);
            let lat = ll.lat.clamp(bbox.min_lat, bbox.max_lat);
            let lon = ll.lon.clamp(bbox.min_lon, bbox.max_lon);
            by_kind[kind as usize].push(sites.len());
            sites.push(Site {
                kind,
                lat,
                lon,
                x,
                y,
                capacity,
            });
        }
    }
    Ok(World {
        bbox: *bbox,
        projection,
        sites,
        by_kind,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulate::ParamSpec;

    fn params() -> SimParams {
        let spec = ParamSpec::builtin();
        SimParams::resolve(&spec, &spec.defaults()).unwrap()
    }

    #[test]
    fn density_arithmetic() {
        assert_eq!(site_count(5.0, 1000), 5);
        assert_eq!(site_count(5.0, 182), 1);
        assert_eq!(site_count(400.0, 182), 73);
        assert_eq!(site_count(0.0, 182), 0);
        let mut p = params();
        p.recreation_density = 5.0;
        let w = build_world(&BBox::BEIJING, 1000, &p, 7).unwrap();
        assert_eq!(w.of_kind(SiteKind::Recreation).len(), 5);
    }

    #[test]
    fn zero_homes_is_a_configuration_error() {
        let mut p = params();
        p.home_density = 0.0;
        assert!(matches!(build_world(&BBox::BEIJING, 10, &p, 1), Err(Error::Config(_))));
    }

    #[test]
    fn deterministic_and_contained() {
        let p = params();
        let a = build_world(&BBox::BEIJING, 182, &p, 42).unwrap();
        let b = build_world(&BBox::BEIJING, 182, &p, 42).unwrap();
        assert_eq!(a, b);
        assert!(a.sites().iter().all(|s| BBox::BEIJING.contains(s)));
        for kind in SiteKind::ALL {
            assert!(!a.of_kind(kind).is_empty());
        }
        let c = build_world(&BBox::BEIJING, 182, &p, 43).unwrap();
        assert_ne!(a.sites(), c.sites());
    }

    #[test]
    fn projection_round_trip() {
        let proj = Projection::new(BBox::BEIJING.center());
        let p = LatLon::new(39.95, 116.3);
        let (x, y) = proj.to_plane(&p);
        let q = proj.to_lat_lon(x, y);
        assert!((p.lat - q.lat).abs() < 1e-12 && (p.lon - q.lon).abs() < 1e-12);
        // planar distance agrees with great-circle distance at city scale
        let o = BBox::BEIJING.center();
        let d_plane = x.hypot(y);
        let d_sphere = crate::geodata::haversine(&o, &p);
        assert!((d_plane - d_sphere).abs() / d_sphere < 0.005);
    }
}
