// Screening workflow state machine: idle -> submitting -> showing | error.
// One request is in flight at a time; a knowledge-base switch requested
// mid-flight is queued and applied when the response lands. All service
// numbers pass through untouched.

import { ApiClient, ServiceError, UNREACHABLE_MESSAGE } from "./api.js";
import {
  buildRequest,
  parseSubjectFile,
  SubjectParseError,
  validateAge,
  type ParsedSubject,
} from "./subject.js";
import type { KbInfo, PredictionResponse } from "./types.js";

export type Phase = "idle" | "submitting" | "showing" | "error";

export interface UiState {
  phase: Phase;
  ageText: string;
  age: number | null;
  subject: ParsedSubject | null;
  subjectFileName: string | null;
  subjectError: string | null;
  canSubmit: boolean;
  catalog: KbInfo[];
  activeKb: string | null;
  pendingKbSelect: string | null;
  result: PredictionResponse | null;
  errorMessage: string | null;
}

export class ScreeningController {
  private readonly api: ApiClient;
  private readonly onChange: (state: UiState) => void;
  private phase: Phase = "idle";
  private ageText = "";
  private age: number | null = null;
  private subject: ParsedSubject | null = null;
  private subjectFileName: string | null = null;
  private subjectError: string | null = null;
  private catalog: KbInfo[] = [];
  private activeKb: string | null = null;
  private pendingKbSelect: string | null = null;
  private result: PredictionResponse | null = null;
  private errorMessage: string | null = null;

  constructor(api: ApiClient, onChange?: (state: UiState) => void) {
    this.api = api;
    this.onChange = onChange ?? (() => undefined);
  }

  get state(): UiState {
    return {
      phase: this.phase,
      ageText: this.ageText,
      age: this.age,
      subject: this.subject,
      subjectFileName: this.subjectFileName,
      subjectError: this.subjectError,
      canSubmit: this.canSubmit(),
      catalog: this.catalog,
      activeKb: this.activeKb,
      pendingKbSelect: this.pendingKbSelect,
      result: this.result,
      errorMessage: this.errorMessage,
    };
  }

  private canSubmit(): boolean {
    return this.phase !== "submitting" && this.age !== null && this.subject !== null;
  }

  private emit(): void {
    this.onChange(this.state);
  }

  setAge(text: string): void {
    this.ageText = text;
    this.age = validateAge(text);
    this.emit();
  }

  setSubjectFile(fileName: string, text: string): void {
    this.subjectFileName = fileName;
    try {
      this.subject = parseSubjectFile(text);
      this.subjectError = null;
    } catch (error) {
      this.subject = null;
      this.subjectError =
        error instanceof SubjectParseError ? error.message : "could not read the file";
    }
    this.emit();
  }

  async refreshCatalog(): Promise<void> {
    try {
      const catalog = await this.api.listKbs();
      this.catalog = catalog.knowledge_bases;
      this.activeKb = catalog.active;
    } catch (error) {
      this.errorMessage = error instanceof ServiceError ? error.message : UNREACHABLE_MESSAGE;
      this.phase = this.result ? "showing" : "error";
    }
    this.emit();
  }

  async submit(): Promise<void> {
    if (!this.canSubmit() || this.age === null || this.subject === null) {
      return; // single-flight: ignore while a request is pending or form invalid
    }
    const request = buildRequest(this.subject, this.age);
    this.phase = "submitting";
    this.errorMessage = null;
    this.emit();
    try {
      const result = await this.api.predict(request);
      this.result = result;
      this.phase = "showing";
    } catch (error) {
      // the form (age and parsed file) is preserved for retry
      this.errorMessage = error instanceof ServiceError ? error.message : UNREACHABLE_MESSAGE;
      this.phase = "error";
    }
    this.emit();
    await this.flushPendingKbSelect();
  }

  async selectKb(name: string): Promise<void> {
    if (this.phase === "submitting") {
      this.pendingKbSelect = name; // applied when the in-flight request lands
      this.emit();
      return;
    }
    try {
      const response = await this.api.selectKb(name);
      this.activeKb = response.active;
      this.catalog = this.catalog.map((kb) => ({ ...kb, active: kb.name === response.active }));
    } catch (error) {
      this.errorMessage = error instanceof ServiceError ? error.message : UNREACHABLE_MESSAGE;
      this.phase = this.result ? "showing" : "error";
    }
    this.emit();
  }

  private async flushPendingKbSelect(): Promise<void> {
    if (this.pendingKbSelect === null || this.phase === "submitting") {
      return;
    }
    const name = this.pendingKbSelect;
    this.pendingKbSelect = null;
    await this.selectKb(name);
  }

  dismissError(): void {
    this.errorMessage = null;
    this.phase = this.result ? "showing" : "idle";
    this.emit();
  }
}
