#![allow(dead_code)]

pub mod gradcheck;
pub mod oracles;
pub mod strategies;

/// Teacher source of a weight-copied student parameter; `copy_map` is
/// 1-based, block indices in names are 0-based.
pub fn copy_source_name(name: &str, copy_map: &[usize]) -> String {
    let parts: Vec<&str> = name.splitn(3, '.').collect();
    match parts.as_slice() {
        [stack @ ("encoder" | "decoder"), index, rest] if index.parse::<usize>().is_ok() => {
            format!("{stack}.{}.{rest}", copy_map[index.parse::<usize>().unwrap()] - 1)
        }
        _ => name.to_string(),
    }
}
