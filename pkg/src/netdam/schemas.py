"""Request and response models for the controller API."""

from __future__ import annotations

from typing import Optional, Union

from pydantic import BaseModel, Field


class RegionOut(BaseModel):
    id: int
    offset: int
    size: int
    owner: str = ""


class AllocRequest(BaseModel):
    size: int = Field(gt=0)
    owner: str = ""


class FreeRequest(BaseModel):
    id: int


class PoolOut(BaseModel):
    devices: list[str]
    block_size: int
    span: int
    total_size: int
    regions: list[RegionOut]
    free: list[tuple[int, int]]


class WriteRequest(BaseModel):
    offset: int = Field(default=0, ge=0)
    data_hex: str


class ReadRequest(BaseModel):
    offset: int = Field(default=0, ge=0)
    length: int = Field(gt=0)


class ReadResponse(BaseModel):
    data_hex: str


class InstructionRequest(BaseModel):
    endpoint: str
    opcode: Union[int, str]
    address: int = Field(default=0, ge=0)
    length: Optional[int] = Field(default=None, ge=0)
    payload_hex: str = ""
    dtype: Union[int, str] = 0
    target_packet: bool = False
    reliable: bool = True


class AckOut(BaseModel):
    status: str
    status_code: int
    sequence: int
    opcode: int
    payload_hex: str
    latency_us: float


class AllreduceRequest(BaseModel):
    vector_length: int = Field(gt=0)
    chunk_elems: int = Field(default=2048, ge=1, le=2048)
    seed: int = 0


class AllreduceOut(BaseModel):
    verdict: str
    report: dict


class ErrorOut(BaseModel):
    error: str
    detail: str
