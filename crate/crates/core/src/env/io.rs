//! Line-oriented instance files.
//!
//! ```text
//! ssco-aim v1 n=<N> seed=<S>
//! edge <u> <v> <p>
//!
//! ssco-sop v1 n=<N> seed=<S> depot=<d> limit=<L> penalty=<r> noise=<s> pmax=<p>
//! city <idx> <x> <y> <p0>
//! ```
//!
//! Floats are written in shortest round-trip form, so write-then-read is exact.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use super::{GraphInstance, SopInstance};
use crate::{Error, Result};

pub fn write_aim(g: &GraphInstance) -> String {
    let mut out = format!("ssco-aim v1 n={} seed={}\n", g.node_count, g.instance_id);
    for (&(u, v), p) in g.edges.iter().zip(&g.edge_prob) {
        writeln!(out, "edge {u} {v} {p}").unwrap();
    }
    out
}

pub fn write_sop(s: &SopInstance) -> String {
    let mut out = format!(
        "ssco-sop v1 n={} seed={} depot={} limit={} penalty={} noise={} pmax={}\n",
        s.city_count(),
        s.instance_id,
        s.depot,
        s.daily_limit,
        s.penalty_rate,
        s.noise_scale,
        s.p_max
    );
    for (i, (c, p)) in s.city_coords.iter().zip(&s.profit_init).enumerate() {
        writeln!(out, "city {i} {} {} {p}", c[0], c[1]).unwrap();
    }
    out
}

fn parse<T: FromStr>(tok: &str, line: usize) -> Result<T> {
    tok.parse()
        .map_err(|_| Error::Format(format!("line {line}: cannot parse `{tok}`")))
}

fn header(line: &str, magic: &str, keys: &[&str]) -> Result<HashMap<String, String>> {
    let mut toks = line.split_whitespace();
    if toks.next() != Some(magic) || toks.next() != Some("v1") {
        return Err(Error::Format(format!("expected `{magic} v1` header")));
    }
    let mut map = HashMap::new();
    for t in toks {
        let (k, v) = t
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("malformed header field `{t}`")))?;
        if !keys.contains(&k) {
            return Err(Error::Format(format!("unknown header field `{k}`")));
        }
        if map.insert(k.to_string(), v.to_string()).is_some() {
            return Err(Error::Format(format!("repeated header field `{k}`")));
        }
    }
    for k in keys {
        if !map.contains_key(*k) {
            return Err(Error::Format(format!("header is missing `{k}`")));
        }
    }
    Ok(map)
}

fn body(text: &str) -> impl Iterator<Item = (usize, Vec<&str>)> {
    text.lines()
        .enumerate()
        .skip(1)
        .map(|(i, l)| (i + 1, l.split_whitespace().collect::<Vec<_>>()))
        .filter(|(_, t)| !t.is_empty())
}

pub fn read_aim(text: &str) -> Result<GraphInstance> {
    let first = text.lines().next().unwrap_or("");
    let h = header(first, "ssco-aim", &["n", "seed"])?;
    let n: usize = parse(&h["n"], 1)?;
    let seed: u64 = parse(&h["seed"], 1)?;
    let mut edges = Vec::new();
    let mut probs = Vec::new();
    for (line, t) in body(text) {
        if t.len() != 4 || t[0] != "edge" {
            return Err(Error::Format(format!(
                "line {line}: expected `edge <u> <v> <p>`"
            )));
        }
        edges.push((parse(t[1], line)?, parse(t[2], line)?));
        probs.push(parse(t[3], line)?);
    }
    GraphInstance::new(n, edges, probs, seed)
}

pub fn read_sop(text: &str) -> Result<SopInstance> {
    let first = text.lines().next().unwrap_or("");
    let h = header(
        first,
        "ssco-sop",
        &["n", "seed", "depot", "limit", "penalty", "noise", "pmax"],
    )?;
    let n: usize = parse(&h["n"], 1)?;
    let mut coords = vec![None; n];
    let mut profits = vec![0.0; n];
    for (line, t) in body(text) {
        if t.len() != 5 || t[0] != "city" {
            return Err(Error::Format(format!(
                "line {line}: expected `city <idx> <x> <y> <p0>`"
            )));
        }
        let i: usize = parse(t[1], line)?;
        if i >= n || coords[i].is_some() {
            return Err(Error::Format(format!(
                "line {line}: bad or repeated city {i}"
            )));
        }
        coords[i] = Some([parse(t[2], line)?, parse(t[3], line)?]);
        profits[i] = parse(t[4], line)?;
    }
    let city_coords = coords
        .into_iter()
        .enumerate()
        .map(|(i, c)| c.ok_or_else(|| Error::Format(format!("city {i} missing"))))
        .collect::<Result<Vec<_>>>()?;
    let inst = SopInstance {
        city_coords,
        depot: parse(&h["depot"], 1)?,
        daily_limit: parse(&h["limit"], 1)?,
        penalty_rate: parse(&h["penalty"], 1)?,
        profit_init: profits,
        noise_scale: parse(&h["noise"], 1)?,
        p_max: parse(&h["pmax"], 1)?,
        instance_id: parse(&h["seed"], 1)?,
    };
    inst.validate()?;
    Ok(inst)
}

pub fn load_aim(path: &Path) -> Result<GraphInstance> {
    read_aim(&std::fs::read_to_string(path)?)
}

pub fn load_sop(path: &Path) -> Result<SopInstance> {
    read_sop(&std::fs::read_to_string(path)?)
}
