//! Shared fixtures for integration tests: a seeded synthetic Solidity corpus
//! and the reference per-contract success percentages.

#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ragaudit_core::corpus::load_catalog;
use ragaudit_core::{ContractDocument, VulnerabilityType};

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests").join("fixtures").join(name)
}

pub fn catalog() -> Vec<VulnerabilityType> {
    load_catalog(&fixture("catalog.json")).expect("fixture catalog loads")
}

/// Per-contract success percentages of the guided run, in contract order.
pub const GUIDED_PERCENTAGES: [f64; 52] = [
    77.5, 97.5, 25.0, 100.0, 95.0, 75.0, 57.5, 7.5, 52.5, 25.0, 100.0, 0.0, 75.0, 65.0, 15.0, 2.5, 60.0, 100.0, 95.0,
    100.0, 55.0, 70.0, 15.0, 82.5, 100.0, 15.0, 60.526, 97.5, 87.5, 82.5, 70.0, 12.5, 95.0, 5.0, 85.0, 52.5, 72.5,
    17.5, 12.5, 100.0, 45.0, 100.0, 7.5, 82.5, 67.5, 92.5, 85.0, 90.0, 77.5, 92.5, 52.5, 55.0,
];

/// `(successes, decided trials)` reproducing `pct` out of at most `trials`:
/// the largest denominator `d <= trials` for which `pct * d / 100` is an
/// integer at the printed precision.
pub fn counts_for_percentage(pct: f64, trials: u32) -> (u32, u32) {
    for d in (1..=trials).rev() {
        let s = (pct * d as f64 / 100.0).round();
        if (100.0 * s / d as f64 - pct).abs() < 5e-4 {
            return (s as u32, d);
        }
    }
    panic!("no count reproduces {pct}%");
}

const TYPES: [&str; 6] = ["uint256", "address", "bool", "bytes32", "uint8", "string"];
const NOTES: [&str; 6] = [
    "handles deposits",
    "légacy path, kept for compatibility",
    "owner-only ✓",
    "TODO: audit 🔍",
    "fee = amount * 3 / 1000",
    "see issue #42",
];

fn snippet(rng: &mut ChaCha8Rng, i: usize) -> String {
    match rng.random_range(0..6) {
        0 => format!(
            "    function withdraw{i}() public {{\n        uint256 amount = balances[msg.sender];\n        (bool ok, ) = msg.sender.call{{value: amount}}(\"\");\n        require(ok);\n        balances[msg.sender] = 0;\n    }}\n"
        ),
        1 => format!(
            "    function lottery{i}() public payable {{\n        if (uint256(keccak256(abi.encodePacked(block.timestamp))) % 2 == 0) {{\n            payable(msg.sender).transfer(address(this).balance);\n        }}\n    }}\n"
        ),
        2 => format!(
            "    function add{i}(uint8 a, uint8 b) public pure returns (uint8) {{\n        unchecked {{ return a + b; }}\n    }}\n"
        ),
        3 => format!(
            "    function kill{i}() public {{\n        selfdestruct(payable(msg.sender));\n    }}\n"
        ),
        4 => format!(
            "    function pay{i}(address[] memory to) public {{\n        for (uint256 j = 0; j < to.length; j++) {{\n            payable(to[j]).send(1 ether);\n        }}\n    }}\n"
        ),
        _ => format!(
            "    function setOwner{i}(address o) public {{\n        require(tx.origin == owner);\n        owner = o;\n    }}\n"
        ),
    }
}

/// One synthetic contract; sizes range from a few hundred to a few thousand
/// tokens.
pub fn solidity_source(rng: &mut ChaCha8Rng, name: &str) -> String {
    let mut s = String::from("// SPDX-License-Identifier: MIT\npragma solidity ^0.8.0;\n\n");
    s.push_str(&format!("contract {name} {{\n    address public owner;\n    mapping(address => uint256) public balances;\n"));
    for v in 0..rng.random_range(0..8) {
        s.push_str(&format!("    {} internal v{v};\n", TYPES[rng.random_range(0..TYPES.len())]));
    }
    s.push('\n');
    for i in 0..rng.random_range(1..40) {
        if rng.random_bool(0.3) {
            s.push_str(&format!("    // {}\n", NOTES[rng.random_range(0..NOTES.len())]));
        }
        s.push_str(&snippet(rng, i));
        s.push('\n');
    }
    s.push_str("}\n");
    s
}

/// `n` documents named `<prefix>NNN.sol`, deterministic in `seed`.
pub fn synthetic_corpus(prefix: &str, n: usize, seed: u64) -> Vec<ContractDocument> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let name = format!("{}{:03}", prefix.replace(['/', '-'], "_"), i);
            ContractDocument::from_source(format!("{prefix}{i:03}.sol"), solidity_source(&mut rng, &name))
        })
        .collect()
}

pub fn write_corpus(dir: &Path, docs: &[ContractDocument]) {
    for d in docs {
        let path = dir.join(&d.id);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).unwrap();
        }
        fs::write(path, &d.source_text).unwrap();
    }
}
