"""Unpack, repack and v1-sign application archives."""

from __future__ import annotations

import base64
import datetime as dt
import enum
import hashlib
import io
import json
import random
import zipfile
import zlib
from dataclasses import dataclass
from pathlib import Path

import sympy
from asn1crypto import cms
from cryptography import x509
from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import padding, rsa
from cryptography.hazmat.primitives.serialization import pkcs7
from cryptography.x509.oid import NameOID

from .errors import BadZip, ConfigError, CryptoFailure, EntryTooLarge, MissingClassesDex

CLASSES_DEX = "classes.dex"
ANDROID_MANIFEST = "AndroidManifest.xml"
MANIFEST_PATH = "META-INF/MANIFEST.MF"
SF_PATH = "META-INF/CERT.SF"
BLOCK_PATH = "META-INF/CERT.RSA"
ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)
STORE_BELOW = 1024
MAX_ENTRY_BYTES = 0xFFFFFFFF
LINE_LIMIT = 72
CREATED_BY = "dexweaver"
KEY_BITS = 2048
_SIGNATURE_SUFFIXES = (".SF", ".RSA", ".DSA", ".EC")


def is_signature_entry(path: str) -> bool:
    """True for the v1 signing files under META-INF/."""
    upper = path.upper()
    if not upper.startswith("META-INF/") or "/" in upper[9:]:
        return False
    name = upper[9:]
    return name == "MANIFEST.MF" or name.endswith(_SIGNATURE_SUFFIXES) or name.startswith("SIG-")


@dataclass(frozen=True)
class Archive:
    entries: tuple[tuple[str, bytes], ...]

    def __post_init__(self):
        names = [p for p, _ in self.entries]
        if len(set(names)) != len(names):
            raise BadZip("duplicate entry names")

    def get(self, path: str) -> bytes | None:
        for p, data in self.entries:
            if p == path:
                return data
        return None

    @property
    def dex(self) -> bytes:
        data = self.get(CLASSES_DEX)
        if data is None:
            raise MissingClassesDex("archive has no classes.dex")
        return data

    @property
    def manifest_bytes(self) -> bytes | None:
        return self.get(ANDROID_MANIFEST)

    @property
    def content_entries(self) -> tuple[tuple[str, bytes], ...]:
        return tuple(e for e in self.entries if not is_signature_entry(e[0]))

    @property
    def signature_entries(self) -> tuple[tuple[str, bytes], ...]:
        return tuple(e for e in self.entries if is_signature_entry(e[0]))


def _read_zip(data: bytes) -> list[tuple[str, bytes]]:
    try:
        zf = zipfile.ZipFile(io.BytesIO(data))
    except (zipfile.BadZipFile, ValueError, OSError) as exc:
        raise BadZip(f"not a readable zip archive: {exc}") from None
    out = []
    with zf:
        for info in zf.infolist():
            if info.is_dir():
                continue
            try:
                out.append((info.filename, zf.read(info)))
            except (zipfile.BadZipFile, zlib.error, EOFError, OSError, NotImplementedError) as exc:
                raise BadZip(f"{info.filename}: {exc}") from None
    return out


def unpack(apk: bytes) -> Archive:
    archive = Archive(tuple(_read_zip(apk)))
    if archive.get(CLASSES_DEX) is None:
        raise MissingClassesDex("archive has no classes.dex")
    return archive


def write_zip(entries, max_entry_bytes: int = MAX_ENTRY_BYTES) -> bytes:
    """Deterministic zip: sorted names, fixed timestamps, store small entries."""
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w") as zf:
        for path, data in sorted(entries):
            if len(data) > max_entry_bytes:
                raise EntryTooLarge(f"{path} is {len(data)} bytes (limit {max_entry_bytes})")
            info = zipfile.ZipInfo(path, date_time=ZIP_EPOCH)
            info.create_system = 0
            info.external_attr = 0
            if len(data) < STORE_BELOW:
                info.compress_type = zipfile.ZIP_STORED
                zf.writestr(info, data)
            else:
                info.compress_type = zipfile.ZIP_DEFLATED
                zf.writestr(info, data, compresslevel=9)
    return buf.getvalue()


def repack(archive: Archive, new_dex: bytes, max_entry_bytes: int = MAX_ENTRY_BYTES) -> bytes:
    """New archive with ``new_dex`` as classes.dex and no old signature files."""
    entries = {p: d for p, d in archive.content_entries}
    entries[CLASSES_DEX] = new_dex
    return write_zip(entries.items(), max_entry_bytes)


# -- identities --------------------------------------------------------------

@dataclass(frozen=True)
class SigningIdentity:
    private_key: rsa.RSAPrivateKey
    certificate: x509.Certificate

    @property
    def public_key_der(self) -> bytes:
        return self.private_key.public_key().public_bytes(
            serialization.Encoding.DER, serialization.PublicFormat.SubjectPublicKeyInfo)

    def to_json(self) -> dict:
        key_pem = self.private_key.private_bytes(
            serialization.Encoding.PEM, serialization.PrivateFormat.PKCS8, serialization.NoEncryption())
        cert_pem = self.certificate.public_bytes(serialization.Encoding.PEM)
        return {"key_pem": key_pem.decode("ascii"), "cert_pem": cert_pem.decode("ascii")}

    @classmethod
    def from_json(cls, data) -> SigningIdentity:
        try:
            key = serialization.load_pem_private_key(data["key_pem"].encode("ascii"), password=None)
            cert = x509.load_pem_x509_certificate(data["cert_pem"].encode("ascii"))
        except (KeyError, TypeError, AttributeError, ValueError) as exc:
            raise ConfigError(f"bad keystore: {exc}") from None
        if not isinstance(key, rsa.RSAPrivateKey):
            raise ConfigError("keystore key is not an RSA key")
        if cert.public_key().public_numbers() != key.public_key().public_numbers():
            raise ConfigError("keystore certificate does not match its key")
        return cls(key, cert)


def save_identity(identity: SigningIdentity, path) -> None:
    Path(path).write_text(json.dumps(identity.to_json(), indent=2) + "\n", encoding="utf-8")


def load_identity(path) -> SigningIdentity:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"no such keystore: {path}") from None
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ConfigError(f"{path}: not a JSON keystore ({exc})") from None
    return SigningIdentity.from_json(data)


def _seeded_key(rng: random.Random) -> rsa.RSAPrivateKey:
    e = 65537
    half = KEY_BITS // 2
    while True:
        # top two bits set so the modulus has exactly KEY_BITS bits
        p = sympy.nextprime(rng.getrandbits(half) | (3 << (half - 2)))
        q = sympy.nextprime(rng.getrandbits(half) | (3 << (half - 2)))
        if p == q or (p - 1) % e == 0 or (q - 1) % e == 0:
            continue
        d = pow(e, -1, (p - 1) * (q - 1))
        public = rsa.RSAPublicNumbers(e, p * q)
        numbers = rsa.RSAPrivateNumbers(p, q, d, rsa.rsa_crt_dmp1(d, p), rsa.rsa_crt_dmq1(d, q),
                                        rsa.rsa_crt_iqmp(p, q), public)
        return numbers.private_key()


def generate_identity(seed: int | None = None, common_name: str = "dexweaver") -> SigningIdentity:
    """Fresh RSA-2048 key and self-signed certificate; reproducible when seeded."""
    try:
        if seed is None:
            key = rsa.generate_private_key(public_exponent=65537, key_size=KEY_BITS)
            serial = x509.random_serial_number()
            start = dt.datetime.now(dt.timezone.utc) - dt.timedelta(days=1)
        else:
            rng = random.Random(seed)
            key = _seeded_key(rng)
            serial = rng.getrandbits(63) + 1
            start = dt.datetime(2020, 1, 1, tzinfo=dt.timezone.utc)
        name = x509.Name([x509.NameAttribute(NameOID.COMMON_NAME, common_name)])
        cert = (
            x509.CertificateBuilder()
            .subject_name(name)
            .issuer_name(name)
            .public_key(key.public_key())
            .serial_number(serial)
            .not_valid_before(start)
            .not_valid_after(start + dt.timedelta(days=365 * 30))
            .add_extension(x509.BasicConstraints(ca=False, path_length=None), critical=True)
            .sign(key, hashes.SHA256())
        )
    except (ValueError, TypeError) as exc:
        raise CryptoFailure(f"key generation failed: {exc}") from exc
    return SigningIdentity(key, cert)


# -- manifest files ----------------------------------------------------------

def _b64_sha256(data: bytes) -> str:
    return base64.b64encode(hashlib.sha256(data).digest()).decode("ascii")


def _header_line(name: str, value: str) -> bytes:
    """One manifest header, wrapped at 72 bytes with single-space continuations."""
    raw = f"{name}: {value}".encode("utf-8")
    lines = [raw[:LINE_LIMIT]]
    rest = raw[LINE_LIMIT:]
    while rest:
        lines.append(b" " + rest[:LINE_LIMIT - 1])
        rest = rest[LINE_LIMIT - 1:]
    return b"".join(line + b"\r\n" for line in lines)


def _section(headers) -> bytes:
    return b"".join(_header_line(k, v) for k, v in headers) + b"\r\n"


def build_manifest(entries) -> tuple[bytes, bytes, list[tuple[str, bytes]]]:
    """MANIFEST.MF bytes, its main section, and each per-entry section."""
    main = _section([("Manifest-Version", "1.0"), ("Created-By", CREATED_BY)])
    sections = [(path, _section([("Name", path), ("SHA-256-Digest", _b64_sha256(data))]))
                for path, data in sorted(entries)]
    return main + b"".join(s for _, s in sections), main, sections


def build_signature_file(manifest: bytes, main: bytes, sections) -> bytes:
    head = _section([
        ("Signature-Version", "1.0"),
        ("Created-By", CREATED_BY),
        ("SHA-256-Digest-Manifest", _b64_sha256(manifest)),
        ("SHA-256-Digest-Manifest-Main-Attributes", _b64_sha256(main)),
    ])
    return head + b"".join(_section([("Name", path), ("SHA-256-Digest", _b64_sha256(sec))])
                           for path, sec in sections)


def parse_manifest(data: bytes) -> list[dict[str, str]]:
    """Sections of a manifest-style file as header dictionaries (main section first)."""
    text = data.decode("utf-8").replace("\r\n", "\n")
    sections, current, last = [], {}, None
    for line in text.split("\n"):
        if not line:
            if current:
                sections.append(current)
            current, last = {}, None
        elif line.startswith(" "):
            if last is None:
                raise ValueError("continuation line without a header")
            current[last] += line[1:]
        else:
            key, sep, value = line.partition(": ")
            if not sep:
                raise ValueError(f"bad manifest line {line!r}")
            current[key] = value
            last = key
    if current:
        sections.append(current)
    return sections


def _raw_sections(data: bytes) -> dict[str, bytes]:
    """Per-entry manifest sections keyed by name, as the exact bytes that were digested."""
    out = {}
    for chunk in data.split(b"\r\n\r\n")[1:]:
        if not chunk:
            continue
        raw = chunk + b"\r\n\r\n"
        fields = parse_manifest(raw)
        if fields and "Name" in fields[0]:
            out[fields[0]["Name"]] = raw
    return out


# -- signing -----------------------------------------------------------------

def sign(apk: bytes, identity: SigningIdentity) -> bytes:
    """v1 (JAR) signature with SHA-256 digests and a detached PKCS#7 block."""
    archive = Archive(tuple(_read_zip(apk)))
    content = archive.content_entries
    manifest, main, sections = build_manifest(content)
    sf = build_signature_file(manifest, main, sections)
    try:
        block = (
            pkcs7.PKCS7SignatureBuilder()
            .set_data(sf)
            .add_signer(identity.certificate, identity.private_key, hashes.SHA256())
            .sign(serialization.Encoding.DER,
                  [pkcs7.PKCS7Options.DetachedSignature, pkcs7.PKCS7Options.NoAttributes])
        )
    except (ValueError, TypeError) as exc:
        raise CryptoFailure(f"signing failed: {exc}") from exc
    return write_zip(list(content) + [(MANIFEST_PATH, manifest), (SF_PATH, sf), (BLOCK_PATH, block)])


class Status(str, enum.Enum):
    VERIFIED = "Verified"
    DIGEST_MISMATCH = "DigestMismatch"
    UNTRUSTED_SIGNER = "UntrustedSigner"
    UNSIGNED = "Unsigned"


@dataclass(frozen=True)
class Verification:
    status: Status
    entry: str | None = None
    detail: str = ""

    def __bool__(self) -> bool:
        return self.status is Status.VERIFIED

    def to_dict(self) -> dict:
        return {"status": self.status.value, "entry": self.entry, "detail": self.detail}


_HASHES = {"sha1": hashes.SHA1, "sha256": hashes.SHA256, "sha384": hashes.SHA384, "sha512": hashes.SHA512}


def _mismatch(entry, detail) -> Verification:
    return Verification(Status.DIGEST_MISMATCH, entry, detail)


def _load_trust(trust) -> x509.Certificate | None:
    if trust is None or isinstance(trust, x509.Certificate):
        return trust
    if isinstance(trust, SigningIdentity):
        return trust.certificate
    data = bytes(trust)
    if data.lstrip().startswith(b"-----BEGIN"):
        return x509.load_pem_x509_certificate(data)
    return x509.load_der_x509_certificate(data)


def verify(apk: bytes, trust=None) -> Verification:
    """Check a v1 signature; ``trust`` optionally pins the expected signer certificate."""
    try:
        zf = zipfile.ZipFile(io.BytesIO(apk))
    except (zipfile.BadZipFile, ValueError, OSError) as exc:
        return _mismatch(None, f"archive unreadable: {exc}")
    entries = {}
    with zf:
        for info in zf.infolist():
            if info.is_dir():
                continue
            try:
                entries[info.filename] = zf.read(info)
            except (zipfile.BadZipFile, zlib.error, EOFError, OSError, NotImplementedError) as exc:
                return _mismatch(info.filename, f"entry unreadable: {exc}")
    manifest = entries.get(MANIFEST_PATH)
    sf_name = next((p for p in sorted(entries) if is_signature_entry(p) and p.upper().endswith(".SF")), None)
    if manifest is None or sf_name is None:
        return Verification(Status.UNSIGNED)
    stem = sf_name[:-3]
    block_name = next((stem + s for s in (".RSA", ".DSA", ".EC") if stem + s in entries), None)
    if block_name is None:
        return Verification(Status.UNSIGNED)
    sf = entries[sf_name]

    # entry digests against the manifest
    try:
        sections = parse_manifest(manifest)
    except (UnicodeDecodeError, ValueError) as exc:
        return _mismatch(MANIFEST_PATH, f"malformed manifest: {exc}")
    listed = {s["Name"]: s for s in sections[1:] if "Name" in s}
    for path, data in sorted(entries.items()):
        if is_signature_entry(path):
            continue
        section = listed.get(path)
        if section is None:
            return _mismatch(path, "entry is not listed in the manifest")
        expected = section.get("SHA-256-Digest")
        if expected is None:
            return _mismatch(path, "manifest has no SHA-256 digest for the entry")
        if expected != _b64_sha256(data):
            return _mismatch(path, "entry digest does not match the manifest")
    for path in listed:
        if path not in entries:
            return _mismatch(path, "manifest lists an entry the archive lacks")

    # manifest against the signature file
    try:
        sf_sections = parse_manifest(sf)
    except (UnicodeDecodeError, ValueError) as exc:
        return _mismatch(sf_name, f"malformed signature file: {exc}")
    whole = sf_sections[0].get("SHA-256-Digest-Manifest") if sf_sections else None
    if whole != _b64_sha256(manifest):
        raw = _raw_sections(manifest)
        for s in sf_sections[1:]:
            name = s.get("Name")
            if name is None or raw.get(name) is None or s.get("SHA-256-Digest") != _b64_sha256(raw[name]):
                return _mismatch(MANIFEST_PATH, f"manifest section for {name} does not match {sf_name}")
        if len(sf_sections) - 1 < len(listed):
            return _mismatch(MANIFEST_PATH, f"manifest does not match {sf_name}")

    # the signature block over the signature file
    try:
        cert, ok = _check_block(entries[block_name], sf)
    except (ValueError, KeyError, TypeError) as exc:
        return _mismatch(block_name, f"unreadable signature block: {exc}")
    if not ok:
        return _mismatch(block_name, f"signature does not validate over {sf_name}")
    pinned = _load_trust(trust)
    if pinned is not None and pinned.public_bytes(serialization.Encoding.DER) != cert.public_bytes(
            serialization.Encoding.DER):
        return Verification(Status.UNTRUSTED_SIGNER, block_name, "signer is not the trusted certificate")
    return Verification(Status.VERIFIED)


def _check_block(block: bytes, signed: bytes) -> tuple[x509.Certificate, bool]:
    info = cms.ContentInfo.load(block)
    if info["content_type"].native != "signed_data":
        raise ValueError("not a SignedData structure")
    sd = info["content"]
    certs = [c.chosen for c in sd["certificates"] if c.name == "certificate"]
    signer = sd["signer_infos"][0]
    sid = signer["sid"]
    chosen = None
    for c in certs:
        if sid.name == "issuer_and_serial_number":
            if (c.issuer == sid.chosen["issuer"] and c.serial_number == sid.chosen["serial_number"].native):
                chosen = c
        elif c.key_identifier == sid.chosen.native:
            chosen = c
    if chosen is None:
        raise ValueError("signer certificate not embedded")
    cert = x509.load_der_x509_certificate(chosen.dump())
    algo = _HASHES.get(signer["digest_algorithm"]["algorithm"].native)
    if algo is None:
        raise ValueError("unsupported digest algorithm")
    message = signed
    attrs = signer["signed_attrs"]
    if attrs.native is not None and len(attrs):
        digest = None
        for attr in attrs:
            if attr["type"].native == "message_digest":
                digest = attr["values"][0].native
        h = hashlib.new(signer["digest_algorithm"]["algorithm"].native, signed).digest()
        if digest != h:
            return cert, False
        message = attrs.untag().dump()
    public = cert.public_key()
    if not isinstance(public, rsa.RSAPublicKey):
        raise ValueError("only RSA signers are supported")
    try:
        public.verify(signer["signature"].native, message, padding.PKCS1v15(), algo())
    except InvalidSignature:
        return cert, False
    return cert, True
