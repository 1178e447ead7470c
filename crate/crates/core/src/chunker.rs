//! Reversible tokenization and fixed token-count chunking.
//!
//! The default [`CharMergeTokenizer`] maps every Unicode scalar value to its
//! own token id (the code point) and greedily merges a fixed table of common
//! Solidity fragments into single tokens. Every token decodes to whole
//! characters, so chunk boundaries never split a multi-byte character and
//! decoding any token sequence it produced reproduces the input exactly.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::ContractDocument;
use crate::jsonl;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TokenizerError {
    #[error("token sequence was produced by {found:?}, active tokenizer is {expected:?}")]
    TokenizerMismatch { expected: String, found: String },
    #[error("token id {0} is outside the vocabulary")]
    InvalidTokenId(u32),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub tokens: Vec<u32>,
    pub tokenizer_id: String,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// A reversible tokenizer. Implementations must be deterministic and satisfy
/// `decode(encode(s)) == s` for every string `s`.
pub trait Tokenizer: Send + Sync {
    /// Name and version; recorded with every token sequence and chunk store.
    fn id(&self) -> &str;

    fn encode(&self, text: &str) -> Vec<u32>;

    /// Decodes raw ids. Fails on ids outside the vocabulary.
    fn decode_ids(&self, ids: &[u32]) -> Result<String, TokenizerError>;

    fn count(&self, text: &str) -> usize {
        self.encode(text).len()
    }

    fn tokenize(&self, text: &str) -> TokenSequence {
        TokenSequence { tokens: self.encode(text), tokenizer_id: self.id().to_string() }
    }

    fn detokenize(&self, seq: &TokenSequence) -> Result<String, TokenizerError> {
        if seq.tokenizer_id != self.id() {
            return Err(TokenizerError::TokenizerMismatch {
                expected: self.id().to_string(),
                found: seq.tokenizer_id.clone(),
            });
        }
        self.decode_ids(&seq.tokens)
    }
}

/// Multi-character fragments that encode as one token each. Order defines
/// the id: `MERGE_BASE + position`. Appending entries changes the tokenizer
/// version.
const MERGES: &[&str] = &[
    // whitespace runs
    "\n\n", "\r\n", "  ", "    ", "        ", "\n    ", "\n        ", "\n            ", "\t\t",
    // comments and operators
    "//", "///", "/*", "*/", "/**", "==", "!=", ">=", "<=", "+=", "-=", "=>", "&&", "||", "++", "--",
    "<<", ">>", "**", "();", ");", "){", ") {", "}\n", "{\n", ";\n",
    // keywords and common identifiers
    "pragma", "solidity", "import", "contract", "interface", "library", "abstract", "function",
    "modifier", "event", "emit", "struct", "enum", "mapping", "constructor", "fallback", "receive",
    "returns", "return", "require", "revert", "assert", "public", "private", "internal", "external",
    "view", "pure", "payable", "memory", "storage", "calldata", "constant", "immutable", "override",
    "virtual", "address", "uint256", "uint128", "uint64", "uint32", "uint8", "uint", "int256", "int",
    "bool", "bytes32", "bytes", "string", "true", "false", "if", "else", "for", "while", "do",
    "break", "continue", "new", "delete", "this", "msg", "msg.sender", "msg.value", "msg.data",
    "block.timestamp", "block.number", "tx.origin", "balance", "balances", "transfer",
    "transferFrom", "approve", "allowance", "owner", "onlyOwner", "amount", "value", "call",
    "delegatecall", "selfdestruct", "keccak256", "abi.encodePacked", "abi.encode", "ether", "wei",
    "token", "Token", "IERC20", "ERC20", "success", "sender", "recipient", "totalSupply",
];

/// First id used for merged tokens; ids below it are code points.
pub const MERGE_BASE: u32 = 0x11_0000;

#[derive(Debug, Clone)]
pub struct CharMergeTokenizer {
    /// Merges keyed by first char, longest first.
    by_first: HashMap<char, Vec<(&'static str, u32)>>,
}

impl Default for CharMergeTokenizer {
    fn default() -> Self {
        Self::new()
    }
}

impl CharMergeTokenizer {
    pub const ID: &'static str = "charmerge-v1";

    pub fn new() -> Self {
        let mut by_first: HashMap<char, Vec<(&'static str, u32)>> = HashMap::new();
        for (i, m) in MERGES.iter().enumerate() {
            let first = m.chars().next().expect("merges are non-empty");
            by_first.entry(first).or_default().push((m, MERGE_BASE + i as u32));
        }
        for list in by_first.values_mut() {
            list.sort_by_key(|(m, _)| std::cmp::Reverse(m.chars().count()));
        }
        Self { by_first }
    }

    pub fn vocab_size(&self) -> u32 {
        MERGE_BASE + MERGES.len() as u32
    }

    fn token_text(&self, id: u32) -> Result<TokenPiece, TokenizerError> {
        if id < MERGE_BASE {
            char::from_u32(id).map(TokenPiece::Char).ok_or(TokenizerError::InvalidTokenId(id))
        } else {
            MERGES
                .get((id - MERGE_BASE) as usize)
                .map(|s| TokenPiece::Merge(s))
                .ok_or(TokenizerError::InvalidTokenId(id))
        }
    }
}

enum TokenPiece {
    Char(char),
    Merge(&'static str),
}

impl Tokenizer for CharMergeTokenizer {
    fn id(&self) -> &str {
        Self::ID
    }

    fn encode(&self, text: &str) -> Vec<u32> {
        let mut tokens = Vec::with_capacity(text.len() / 2);
        let mut rest = text;
        while let Some(c) = rest.chars().next() {
            let merged = self
                .by_first
                .get(&c)
                .and_then(|list| list.iter().find(|(m, _)| m.len() > c.len_utf8() && rest.starts_with(m)));
            let (id, len) = match merged {
                Some((m, id)) => (*id, m.len()),
                None => (c as u32, c.len_utf8()),
            };
            tokens.push(id);
            rest = &rest[len..];
        }
        tokens
    }

    fn decode_ids(&self, ids: &[u32]) -> Result<String, TokenizerError> {
        let mut out = String::with_capacity(ids.len());
        for id in ids {
            match self.token_text(*id)? {
                TokenPiece::Char(c) => out.push(c),
                TokenPiece::Merge(s) => out.push_str(s),
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    /// `<contract_id>:<seq_index>`
    pub chunk_id: String,
    pub contract_id: String,
    pub seq_index: usize,
    pub token_count: usize,
    pub text: String,
}

/// Splits a token stream into consecutive windows of `chunk_size` tokens,
/// with no overlap; only the last window may be short.
pub fn chunk_tokens(tokens: &[u32], chunk_size: usize) -> std::slice::Chunks<'_, u32> {
    assert!(chunk_size >= 1, "chunk_size must be positive");
    tokens.chunks(chunk_size)
}

/// Chunks a document's source into `chunk_size`-token pieces.
///
/// Panics if `chunk_size` is zero.
pub fn chunk_document(doc: &ContractDocument, chunk_size: usize, tokenizer: &dyn Tokenizer) -> Vec<Chunk> {
    let tokens = tokenizer.encode(&doc.source_text);
    chunk_tokens(&tokens, chunk_size)
        .enumerate()
        .map(|(seq_index, window)| Chunk {
            chunk_id: format!("{}:{}", doc.id, seq_index),
            contract_id: doc.id.clone(),
            seq_index,
            token_count: window.len(),
            text: tokenizer.decode_ids(window).expect("ids produced by the same tokenizer"),
        })
        .collect()
}

/// First `max_tokens` tokens of `text`, decoded.
pub fn truncate_tokens(text: &str, max_tokens: usize, tokenizer: &dyn Tokenizer) -> String {
    let tokens = tokenizer.encode(text);
    if tokens.len() <= max_tokens {
        return text.to_string();
    }
    tokenizer.decode_ids(&tokens[..max_tokens]).expect("ids produced by the same tokenizer")
}

#[derive(Debug, Serialize, Deserialize)]
struct ChunkStoreHeader {
    tokenizer_id: String,
}

#[derive(Debug, thiserror::Error)]
pub enum ChunkStoreError {
    #[error(transparent)]
    Jsonl(#[from] jsonl::JsonlError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("chunk store is empty (missing header line)")]
    MissingHeader,
}

/// Writes a chunk store: header `{tokenizer_id}` then one chunk per line.
pub fn write_chunk_store(path: &Path, tokenizer_id: &str, chunks: &[Chunk]) -> Result<(), ChunkStoreError> {
    let mut out = BufWriter::new(File::create(path)?);
    jsonl::write_row(&mut out, &ChunkStoreHeader { tokenizer_id: tokenizer_id.to_string() })?;
    for chunk in chunks {
        jsonl::write_row(&mut out, chunk)?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a chunk store, returning the tokenizer id and the chunks.
pub fn read_chunk_store(path: &Path) -> Result<(String, Vec<Chunk>), ChunkStoreError> {
    let mut lines = jsonl::read_lines(path)?.into_iter();
    let (n, header) = lines.next().ok_or(ChunkStoreError::MissingHeader)?;
    let header: ChunkStoreHeader = jsonl::parse_line(path, n, &header)?;
    let chunks = lines
        .map(|(n, line)| jsonl::parse_line(path, n, &line))
        .collect::<Result<Vec<Chunk>, _>>()?;
    Ok((header.tokenizer_id, chunks))
}
